//! Procedural identity/caption generator.
//!
//! Every identity owns a latent attribute tuple. Images paint those
//! attributes as coloured pixel blocks (head, torso, legs, accessory) with
//! per-image jitter and noise; captions fill templates with one token per
//! attribute. Alignment is therefore learnable and fully known.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationRecord, Dataset, ImageRef, Split};
use super::image::Image;
use super::vocab::split_words;
use crate::error::{Error, Result};

pub const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("blue", [0.10, 0.20, 0.85]),
    ("green", [0.10, 0.70, 0.20]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [1.00, 0.55, 0.00]),
];
pub const UPPER: [&str; 4] = ["shirt", "jacket", "sweater", "coat"];
pub const LOWER: [&str; 4] = ["pants", "shorts", "skirt", "jeans"];
pub const ACCESSORIES: [&str; 4] = ["bag", "backpack", "hat", "scarf"];

const TEMPLATES: [&str; 3] = [
    "person in {uc} {ug} and {lc} {lg} with {acc}",
    "{uc} {ug} , {lc} {lg} , with {acc}",
    "{acc} , {uc} {ug} and {lc} {lg}",
];

const SKIN: [f64; 3] = [0.90, 0.75, 0.60];
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

/// Latent attribute tuple of one identity, as indices into the attribute tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub upper_color: usize,
    pub upper: usize,
    pub lower_color: usize,
    pub lower: usize,
    pub accessory: usize,
}

impl Attributes {
    pub const COMBINATIONS: usize = COLORS.len() * UPPER.len() * COLORS.len() * LOWER.len() * ACCESSORIES.len();

    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            upper_color: rng.random_range(0..COLORS.len()),
            upper: rng.random_range(0..UPPER.len()),
            lower_color: rng.random_range(0..COLORS.len()),
            lower: rng.random_range(0..LOWER.len()),
            accessory: rng.random_range(0..ACCESSORIES.len()),
        }
    }

    pub fn caption(&self, template: usize) -> String {
        TEMPLATES[template % TEMPLATES.len()]
            .replace("{uc}", COLORS[self.upper_color].0)
            .replace("{ug}", UPPER[self.upper])
            .replace("{lc}", COLORS[self.lower_color].0)
            .replace("{lg}", LOWER[self.lower])
            .replace("{acc}", ACCESSORIES[self.accessory])
    }

    /// Recovers attributes from any templated caption: the first colour word
    /// belongs to the upper garment, the second to the lower one.
    pub fn parse_caption(caption: &str) -> Option<Self> {
        let mut colors = Vec::new();
        let (mut upper, mut lower, mut accessory) = (None, None, None);
        for w in split_words(caption) {
            if let Some(i) = COLORS.iter().position(|c| c.0 == w) {
                colors.push(i);
            } else if let Some(i) = UPPER.iter().position(|&g| g == w) {
                upper = Some(i);
            } else if let Some(i) = LOWER.iter().position(|&g| g == w) {
                lower = Some(i);
            } else if let Some(i) = ACCESSORIES.iter().position(|&a| a == w) {
                accessory = Some(i);
            }
        }
        match colors.as_slice() {
            [uc, lc] => Some(Self {
                upper_color: *uc,
                upper: upper?,
                lower_color: *lc,
                lower: lower?,
                accessory: accessory?,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// Per-image brightness multiplier range.
    pub brightness: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 16,
            noise_std: 0.05,
            brightness: (0.85, 1.15),
        }
    }
}

fn fill(img: &mut Image, rows: std::ops::Range<usize>, cols: std::ops::Range<isize>, color: [f64; 3]) {
    for y in rows {
        if y >= img.height {
            break;
        }
        for x in cols.clone() {
            if x < 0 || x as usize >= img.width {
                continue;
            }
            for (c, &v) in color.iter().enumerate().take(img.channels) {
                img.set(y, x as usize, c, v);
            }
        }
    }
}

/// A texture color that stays visible on top of `color`.
fn contrast(color: [f64; 3]) -> [f64; 3] {
    let luma = 0.3 * color[0] + 0.6 * color[1] + 0.1 * color[2];
    let target = if luma > 0.5 { 0.0 } else { 1.0 };
    color.map(|v| 0.5 * v + 0.5 * target)
}

/// Paints one instance of an identity.
pub fn render(attrs: &Attributes, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Image::zeros(h, w, 3);
    fill(&mut img, 0..h, 0..w as isize, BACKGROUND);
    let jitter = rng.random_range(-1i64..=1) as isize;
    let x0 = (w / 4) as isize + jitter;
    let x1 = (3 * w / 4) as isize + jitter;
    let head = h / 8;
    let waist = h / 2;
    let knee = 3 * h / 4;

    fill(&mut img, 0..head, (3 * w / 8) as isize + jitter..(5 * w / 8) as isize + jitter, SKIN);

    let upper_rgb = COLORS[attrs.upper_color].1;
    let torso_end = if UPPER[attrs.upper] == "coat" { 5 * h / 8 } else { waist };
    let lower_rgb = COLORS[attrs.lower_color].1;
    let mid = (x0 + x1) / 2;
    match LOWER[attrs.lower] {
        "pants" => fill(&mut img, waist..h, x0..x1, lower_rgb),
        "jeans" => {
            fill(&mut img, waist..h, x0..x1, lower_rgb);
            for x in (x0..x1).step_by(2) {
                fill(&mut img, waist..h, x..x + 1, contrast(lower_rgb));
            }
        }
        "shorts" => {
            fill(&mut img, waist..knee, x0..x1, lower_rgb);
            fill(&mut img, knee..h, x0 + 1..x1 - 1, SKIN);
        }
        _ => {
            fill(&mut img, waist..waist + 2, x0..x1, lower_rgb);
            fill(&mut img, waist + 2..knee, x0 - 3..x1 + 3, lower_rgb);
            fill(&mut img, knee..h, x0 + 2..x1 - 2, SKIN);
        }
    }
    fill(&mut img, head..torso_end, x0..x1, upper_rgb);
    match UPPER[attrs.upper] {
        "sweater" => {
            for y in (head..torso_end).step_by(2) {
                fill(&mut img, y..y + 1, x0..x1, contrast(upper_rgb));
            }
        }
        "jacket" => fill(&mut img, head..torso_end, mid - 2..mid + 2, contrast(upper_rgb)),
        "coat" => fill(&mut img, waist - 1..waist + 1, x0..x1, contrast(upper_rgb)),
        _ => {}
    }
    match ACCESSORIES[attrs.accessory] {
        "hat" => fill(
            &mut img,
            0..(h / 8).max(1),
            (w / 4) as isize + jitter..(3 * w / 4) as isize + jitter,
            [0.80, 0.10, 0.60],
        ),
        "scarf" => {
            for y in head..head + (h / 8).max(1) {
                for x in x0 - 1..x1 + 1 {
                    let v = if (y + x as usize) % 2 == 0 { 0.95 } else { 0.05 };
                    fill(&mut img, y..y + 1, x..x + 1, [v, v, 0.3]);
                }
            }
        }
        "bag" => fill(&mut img, 3 * h / 8..5 * h / 8, x1..x1 + (w / 4) as isize, [0.45, 0.25, 0.10]),
        _ => fill(&mut img, head..3 * h / 8 + 2, x0 - (w / 4) as isize..x0, [0.10, 0.45, 0.45]),
    }

    let brightness = rng.random_range(cfg.brightness.0..=cfg.brightness.1);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    for v in img.data.iter_mut() {
        *v = (*v * brightness + noise.sample(rng)).clamp(0.0, 1.0);
    }
    img
}

/// Identity attribute tuples, distinct per identity, in identity order.
pub fn sample_identities(num_identities: usize, rng: &mut impl Rng) -> Result<Vec<Attributes>> {
    if num_identities > Attributes::COMBINATIONS {
        return Err(Error::Config(format!(
            "at most {} distinct identities can be generated",
            Attributes::COMBINATIONS
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(num_identities);
    while out.len() < num_identities {
        let a = Attributes::random(rng);
        if seen.insert(a) {
            out.push(a);
        }
    }
    Ok(out)
}

pub fn synthetic_key(identity: usize, image: usize) -> String {
    format!("syn/{identity:05}_{image:02}")
}

/// Generates `num_identities × images_per_id` records. With two or more
/// images per identity the last one of each identity goes to the `val` split.
pub fn generate_synthetic(
    num_identities: usize,
    images_per_id: usize,
    captions_per_image: usize,
    rng: &mut impl Rng,
    cfg: &SyntheticConfig,
) -> Result<(Dataset, Vec<Attributes>)> {
    if num_identities == 0 || images_per_id == 0 || captions_per_image == 0 {
        return Err(Error::Config("synthetic counts must all be at least 1".into()));
    }
    let identities = sample_identities(num_identities, rng)?;
    let mut records = Vec::new();
    let mut images = BTreeMap::new();
    for (id, attrs) in identities.iter().enumerate() {
        for k in 0..images_per_id {
            let key = synthetic_key(id, k);
            images.insert(key.clone(), render(attrs, cfg, rng));
            let captions = (0..captions_per_image).map(|c| attrs.caption(c + k)).collect();
            let split = if images_per_id >= 2 && k + 1 == images_per_id {
                Split::Val
            } else {
                Split::Train
            };
            records.push(AnnotationRecord {
                identity_id: id,
                image_ref: ImageRef::Synthetic(key),
                captions,
                split,
            });
        }
    }
    Ok((Dataset { records, images }, identities))
}

/// Checks record invariants and that captions, identities and attributes are
/// mutually consistent: every caption parses, all captions of one identity
/// agree, and distinct identities have distinct attributes.
pub fn validate_synthetic(ds: &Dataset) -> Result<()> {
    let mut by_identity: HashMap<usize, Attributes> = HashMap::new();
    let mut owner: HashMap<Attributes, usize> = HashMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        if r.captions.is_empty() {
            return Err(Error::Contract(format!("record {i} has no captions")));
        }
        let img = ds.image(r)?;
        if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract(format!("record {i} image leaves [0, 1]")));
        }
        for c in &r.captions {
            let a = Attributes::parse_caption(c)
                .ok_or_else(|| Error::Contract(format!("record {i}: caption {c:?} does not parse")))?;
            if let Some(prev) = by_identity.insert(r.identity_id, a) {
                if prev != a {
                    return Err(Error::Contract(format!(
                        "record {i}: identity {} has inconsistent captions",
                        r.identity_id
                    )));
                }
            }
            if let Some(&other) = owner.get(&a) {
                if other != r.identity_id {
                    return Err(Error::Contract(format!(
                        "identities {other} and {} share attributes",
                        r.identity_id
                    )));
                }
            }
            owner.insert(a, r.identity_id);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_attribute_changes_one_token() {
        let a = Attributes {
            upper_color: 0,
            upper: 1,
            lower_color: 2,
            lower: 3,
            accessory: 0,
        };
        let b = Attributes { lower_color: 5, ..a };
        for t in 0..TEMPLATES.len() {
            let wa: Vec<_> = split_words(&a.caption(t)).collect();
            let wb: Vec<_> = split_words(&b.caption(t)).collect();
            assert_eq!(wa.len(), wb.len());
            let diffs: Vec<_> = wa.iter().zip(&wb).filter(|(x, y)| x != y).collect();
            assert_eq!(diffs.len(), 1);
            assert_eq!(diffs[0].1, "white");
        }
    }

    #[test]
    fn captions_parse_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = Attributes::random(&mut rng);
            for t in 0..TEMPLATES.len() {
                assert_eq!(Attributes::parse_caption(&a.caption(t)), Some(a));
            }
        }
    }

    #[test]
    fn same_identity_images_differ_only_by_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ds, _) = generate_synthetic(2, 2, 2, &mut rng, &SyntheticConfig::default()).unwrap();
        let a = ds.image(&ds.records[0]).unwrap();
        let b = ds.image(&ds.records[1]).unwrap();
        assert_ne!(a.data, b.data);
        let pa = Attributes::parse_caption(&ds.records[0].captions[0]);
        let pb = Attributes::parse_caption(&ds.records[1].captions[0]);
        assert_eq!(pa, pb);
        assert_eq!(ds.records[1].split, Split::Val);
    }

    #[test]
    fn minimal_dataset_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ds, _) = generate_synthetic(1, 1, 1, &mut rng, &SyntheticConfig::default()).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.records[0].split, Split::Train);
        validate_synthetic(&ds).unwrap();
    }

    #[test]
    fn zero_counts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_synthetic(0, 1, 1, &mut rng, &SyntheticConfig::default()).is_err());
    }
}
