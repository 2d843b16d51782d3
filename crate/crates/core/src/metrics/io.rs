use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A similarity matrix with the identity of each row (query) and column (gallery item).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    pub sim: Tensor,
    pub query_ids: Vec<usize>,
    pub gallery_ids: Vec<usize>,
}

/// CSV layout: header `query_id,<gallery id>...`, then one row per query
/// starting with its identity.
pub fn write_similarity_csv(path: &Path, table: &SimilarityTable) -> Result<()> {
    let (q, _) = table.sim.dims2()?;
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = vec!["query_id".to_string()];
    header.extend(table.gallery_ids.iter().map(usize::to_string));
    w.write_record(&header).map_err(csv_error)?;
    for i in 0..q {
        let mut rec = vec![table.query_ids[i].to_string()];
        // `{:?}` on f64 prints the shortest representation that round-trips
        rec.extend(table.sim.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_similarity_csv(path: &Path) -> Result<SimilarityTable> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let header = r.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("query_id") {
        return Err(Error::Parse("similarity CSV must start with a query_id column".into()));
    }
    let gallery_ids = header
        .iter()
        .skip(1)
        .map(|s| parse_id(s, "gallery id"))
        .collect::<Result<Vec<_>>>()?;
    let mut query_ids = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        if rec.len() != gallery_ids.len() + 1 {
            return Err(Error::Parse(format!(
                "row {}: expected {} fields, found {}",
                line + 1,
                gallery_ids.len() + 1,
                rec.len()
            )));
        }
        query_ids.push(parse_id(&rec[0], "query id")?);
        for f in rec.iter().skip(1) {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {f:?}: {e}", line + 1)))?,
            );
        }
    }
    if query_ids.is_empty() || gallery_ids.is_empty() {
        return Err(Error::Parse("similarity CSV has no queries or no gallery columns".into()));
    }
    let sim = Tensor::new(vec![query_ids.len(), gallery_ids.len()], data)?;
    Ok(SimilarityTable {
        sim,
        query_ids,
        gallery_ids,
    })
}

fn parse_id(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what} {s:?} is not a nonnegative integer")))
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Parse(e.to_string())
    }
}

/// Embedding file: a checkpoint holding `embeddings` `[n, d]` and `ids` `[n]`.
pub fn write_embeddings(path: &Path, embeddings: &Tensor, ids: &[usize]) -> Result<()> {
    let mut c = Checkpoint::new();
    c.insert("embeddings", embeddings.clone());
    c.insert("ids", Tensor::vector(ids.iter().map(|&i| i as f64).collect()));
    c.save(path)
}

pub fn read_embeddings(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let c = Checkpoint::load(path)?;
    let emb = c.get("embeddings")?.clone();
    let (n, _) = emb.dims2().map_err(|e| Error::Parse(e.to_string()))?;
    let ids: Vec<usize> = c
        .get("ids")?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Parse(format!("embedding id {v} is not a nonnegative integer")))
            }
        })
        .collect::<Result<_>>()?;
    if ids.len() != n {
        return Err(Error::Parse(format!("{n} embeddings but {} ids", ids.len())));
    }
    Ok((emb, ids))
}

/// Cosine similarity of every query row against every gallery row.
pub fn similarity_from_embeddings(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (q, d) = queries.dims2()?;
    let (g, d2) = gallery.dims2()?;
    if d != d2 {
        return Err(Error::shape("similarity", queries.shape(), gallery.shape()));
    }
    let unit = |t: &Tensor, n: usize| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|i| {
                let row = t.row(i);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::Degenerate(format!("embedding row {i} has norm {norm}")));
                }
                Ok(row.iter().map(|v| v / norm).collect())
            })
            .collect()
    };
    let (qu, gu) = (unit(queries, q)?, unit(gallery, g)?);
    let mut out = Vec::with_capacity(q * g);
    for a in &qu {
        for b in &gu {
            out.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::new(vec![q, g], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        let table = SimilarityTable {
            sim: Tensor::from_rows(&[vec![0.1, -1.0 / 3.0], vec![1e-300, 2.5]]).unwrap(),
            query_ids: vec![4, 2],
            gallery_ids: vec![2, 4],
        };
        write_similarity_csv(&path, &table).unwrap();
        assert_eq!(read_similarity_csv(&path).unwrap(), table);
    }

    #[test]
    fn ragged_row_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        std::fs::write(&path, "query_id,0,1\n0,0.5\n").unwrap();
        assert!(matches!(read_similarity_csv(&path), Err(Error::Parse(_))));
        assert!(matches!(read_similarity_csv(&dir.path().join("missing.csv")), Err(Error::Io(_))));
    }
}
