//! Synthetic "ugly duckling" lesion dataset.
//!
//! Every patient gets a style vector (hue, texture frequency, radius) in
//! the unit cube and benign lesions are rendered close to it. A patient
//! bearing a melanoma has exactly one lesion displaced from the style by
//! `outlier_strength` in a random direction. Styles are uniform across
//! patients, so absolute appearance says little about the label; distance
//! from the patient's other lesions says a lot.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_png, InMemory, Record};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range of lesions per patient.
    pub images_per_patient: (usize, usize),
    /// Probability that a patient bears one melanoma.
    pub malignant_rate: f64,
    /// (height, width); images are RGB.
    pub image_size: (usize, usize),
    /// Std of benign lesions around their patient's style, per axis.
    pub style_jitter: f64,
    /// Fraction of the hue circle in use.
    pub hue_span: f64,
    /// Stripe period in pixels at texture 0 and 1.
    pub period_range: (f64, f64),
    /// Lesion radius as a fraction of the image side at radius 0 and 1.
    pub radius_range: (f64, f64),
    /// Distance of the melanoma from the patient style.
    pub outlier_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 200,
            images_per_patient: (3, 7),
            malignant_rate: 0.5,
            image_size: (28, 28),
            style_jitter: 0.04,
            hue_span: 0.72,
            period_range: (9.0, 3.0),
            radius_range: (0.14, 0.36),
            outlier_strength: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let (lo, hi) = self.images_per_patient;
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if lo < 2 || hi < lo {
            return bad(format!("images_per_patient {:?} needs 2 <= min <= max", self.images_per_patient));
        }
        if !(self.malignant_rate > 0.0 && self.malignant_rate < 1.0) {
            return bad(format!("malignant_rate {} is outside (0, 1)", self.malignant_rate));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return bad(format!("image_size {:?} is below 8x8", self.image_size));
        }
        if !(self.outlier_strength > 0.0 && self.outlier_strength <= 0.5) {
            return bad(format!("outlier_strength {} is outside (0, 0.5]", self.outlier_strength));
        }
        if !(self.style_jitter >= 0.0 && self.hue_span > 0.0 && self.hue_span <= 1.0) {
            return bad("style_jitter must be >= 0 and hue_span in (0, 1]".into());
        }
        if self.period_range.0 < 2.0 || self.period_range.1 < 2.0 {
            return bad("stripe periods below 2 pixels alias".into());
        }
        Ok(())
    }
}

/// Ground truth for one rendered lesion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub image_id: String,
    pub patient_id: String,
    pub malignant: bool,
    /// (hue, texture, radius), each in [0,1].
    pub appearance: [f64; 3],
}

#[derive(Serialize)]
struct Meta<'a> {
    config: &'a SynthConfig,
    seed: u64,
    styles: &'a [[f64; 3]],
    lesions: &'a [Lesion],
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Paths are relative to the dataset directory.
    pub records: Vec<Record>,
    pub images: InMemory,
    pub lesions: Vec<Lesion>,
    pub styles: Vec<[f64; 3]>,
}

fn reflect(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r > 1.0 {
        2.0 - r
    } else {
        r
    }
}

/// Style plus a displacement of length `strength`; components that would
/// leave the cube are mirrored, which keeps the displacement length.
fn displace(style: &[f64; 3], strength: f64, rng: &mut impl Rng) -> [f64; 3] {
    let mut dir = [0.0; 3];
    loop {
        for d in &mut dir {
            *d = StandardNormal.sample(rng);
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        if norm > 1e-9 {
            dir.iter_mut().for_each(|d| *d *= strength / norm);
            break;
        }
    }
    let mut out = [0.0; 3];
    for i in 0..3 {
        let v = style[i] + dir[i];
        out[i] = if (0.0..=1.0).contains(&v) { v } else { (style[i] - dir[i]).clamp(0.0, 1.0) };
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one lesion; pose, eccentricity, stripe angle and noise come
/// from `rng`. Values are quantized to multiples of 1/255.
pub fn render(cfg: &SynthConfig, appearance: &[f64; 3], rng: &mut impl Rng) -> Tensor {
    let (h, w) = cfg.image_size;
    let side = h.min(w) as f64;
    let [hue, texture, radius] = *appearance;
    let color = hsv_to_rgb(hue * cfg.hue_span, 0.75, 0.55);
    let period = cfg.period_range.0 + (cfg.period_range.1 - cfg.period_range.0) * texture;
    let r = side * (cfg.radius_range.0 + (cfg.radius_range.1 - cfg.radius_range.0) * radius);

    let cy = (h as f64 - 1.0) / 2.0 + rng.gen_range(-0.08..=0.08) * side;
    let cx = (w as f64 - 1.0) / 2.0 + rng.gen_range(-0.08..=0.08) * side;
    let ecc = 1.0 + rng.gen_range(0.0..0.2);
    let (sin_t, cos_t) = rng.gen_range(0.0..PI).sin_cos();
    let (sin_s, cos_s) = rng.gen_range(0.0..PI).sin_cos();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let skin = [0.87, 0.72, 0.62].map(|c: f64| c + rng.gen_range(-0.03..0.03));
    let noise = Normal::new(0.0, 0.015).expect("finite std");

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let (u, v) = (cos_t * dx + sin_t * dy, -sin_t * dx + cos_t * dy);
            let d = ((u * ecc).powi(2) + (v / ecc).powi(2)).sqrt();
            let alpha = (r - d + 0.5).clamp(0.0, 1.0);
            let stripe = 1.0 + 0.45 * (2.0 * PI * (cos_s * dx + sin_s * dy) / period + phase).sin();
            for ch in 0..3 {
                let lesion = color[ch] * stripe;
                let value = skin[ch] * (1.0 - alpha) + lesion * alpha + noise.sample(rng);
                data.push((value.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("rendered shape")
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, cfg.style_jitter).expect("finite std");
    let mut ds = SynthDataset {
        config: cfg.clone(),
        records: Vec::new(),
        images: InMemory::default(),
        lesions: Vec::new(),
        styles: Vec::with_capacity(cfg.n_patients),
    };
    for p in 0..cfg.n_patients {
        let patient_id = format!("P{p:04}");
        let style: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let n = rng.gen_range(cfg.images_per_patient.0..=cfg.images_per_patient.1);
        let outlier = (rng.gen::<f64>() < cfg.malignant_rate).then(|| rng.gen_range(0..n));
        for k in 0..n {
            let malignant = outlier == Some(k);
            let appearance = if malignant {
                displace(&style, cfg.outlier_strength, &mut rng)
            } else {
                style.map(|s| reflect(s + jitter.sample(&mut rng)))
            };
            let image_id = format!("{patient_id}_{k:02}");
            ds.images.images.push(render(cfg, &appearance, &mut rng));
            ds.records.push(Record {
                path: PathBuf::from("images").join(format!("{image_id}.png")),
                image_id: image_id.clone(),
                patient_id: patient_id.clone(),
                target: malignant as u8,
            });
            ds.lesions.push(Lesion { image_id, patient_id: patient_id.clone(), malignant, appearance });
        }
        ds.styles.push(style);
    }
    Ok(ds)
}

impl SynthDataset {
    /// Writes `manifest.csv`, `images/<id>.png` and `meta.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut csv = csv::Writer::from_path(dir.join("manifest.csv"))?;
        csv.write_record(["image", "patient_id", "target"])?;
        for (r, img) in self.records.iter().zip(&self.images.images) {
            csv.write_record([r.image_id.as_str(), r.patient_id.as_str(), if r.target == 1 { "1" } else { "0" }])?;
            write_png(&dir.join(&r.path), img)?;
        }
        csv.flush().map_err(|e| Error::io(dir.join("manifest.csv"), e))?;
        let meta = Meta { config: &self.config, seed: self.config.seed, styles: &self.styles, lesions: &self.lesions };
        let path = dir.join("meta.json");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &meta)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn malignant_count(&self) -> usize {
        self.records.iter().filter(|r| r.target == 1).count()
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn labels(lesions: &[Lesion]) -> Vec<u8> {
    lesions.iter().map(|l| l.malignant as u8).collect()
}

/// AUC of a patient-blind k-nearest-neighbour vote on appearance: each
/// lesion is scored by the malignant fraction among its `k` nearest
/// lesions from other patients.
pub fn context_free_oracle_auc(lesions: &[Lesion], k: usize) -> Result<f64> {
    let scores: Vec<f64> = lesions
        .iter()
        .map(|a| {
            let mut near: Vec<(f64, bool)> = lesions
                .iter()
                .filter(|b| b.patient_id != a.patient_id)
                .map(|b| (dist(&a.appearance, &b.appearance), b.malignant))
                .collect();
            near.sort_by(|x, y| x.0.total_cmp(&y.0));
            let k = k.min(near.len()).max(1);
            near[..k.min(near.len())].iter().filter(|n| n.1).count() as f64 / k as f64
        })
        .collect();
    auc(&scores, &labels(lesions))
}

/// AUC of the distance from each lesion to the centroid of the same
/// patient's other lesions.
pub fn context_aware_oracle_auc(lesions: &[Lesion]) -> Result<f64> {
    let scores: Vec<f64> = lesions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let others: Vec<&Lesion> = lesions
                .iter()
                .enumerate()
                .filter(|(j, b)| *j != i && b.patient_id == a.patient_id)
                .map(|(_, b)| b)
                .collect();
            let mut centroid = [0.0; 3];
            for o in &others {
                for (c, v) in centroid.iter_mut().zip(&o.appearance) {
                    *c += v / others.len() as f64;
                }
            }
            dist(&a.appearance, &centroid)
        })
        .collect();
    auc(&scores, &labels(lesions))
}
