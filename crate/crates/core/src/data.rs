//! Procedural "identity" corpora.
//!
//! Every identity is a face-like blob: an elliptical head, two eyes and a
//! mouth, painted with a three-colour palette over a background. Samples of
//! the same identity differ by position jitter, lighting and pixel noise.
//! The public corpus draws fresh identities and can be shifted away from
//! the private distribution by rotating palette hues and overlaying stripes.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::seed;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_SHAPE: [usize; 3] = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
pub const IMAGE_LEN: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

/// Public identities start here so they never collide with private ones.
pub const PUBLIC_ID_BASE: u64 = 1 << 32;

/// Width of the hue interval private palettes are drawn from.
const HUE_SPAN: f64 = 0.55;
/// Hue rotation applied at σ = 1.
const HUE_SHIFT: f64 = 0.4;
/// Stripe overlay amplitude at σ = 1 (in [0, 1] pixel units).
const TEXTURE_AMP: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: u64,
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// Horizontal half-distance between the eyes and their height above the centre.
    pub eye_offset: [f64; 2],
    pub eye_radius: f64,
    pub mouth_width: f64,
    /// Hue/saturation/value of skin, features and background.
    pub palette_hsv: [[f64; 3]; 3],
}

impl IdentitySpec {
    pub fn generate(corpus_seed: u64, id: u64) -> Self {
        let mut rng = seed::rng(seed::derive_indexed(corpus_seed, "identity", id));
        let mut color = |s: (f64, f64), v: (f64, f64)| {
            [rng.random_range(0.0..HUE_SPAN), rng.random_range(s.0..s.1), rng.random_range(v.0..v.1)]
        };
        let skin = color((0.35, 0.9), (0.55, 0.95));
        let features = color((0.5, 1.0), (0.15, 0.55));
        let background = color((0.2, 0.8), (0.3, 0.9));
        let half = IMAGE_SIZE as f64 / 2.0;
        IdentitySpec {
            id,
            center: [half + rng.random_range(-2.5..2.5), half + rng.random_range(-2.0..2.0)],
            radii: [rng.random_range(6.5..10.5), rng.random_range(8.0..12.0)],
            eye_offset: [rng.random_range(2.2..4.5), rng.random_range(1.5..4.0)],
            eye_radius: rng.random_range(1.1..2.1),
            mouth_width: rng.random_range(0.25..0.6),
            palette_hsv: [skin, features, background],
        }
    }

    /// Appearance parameters as a flat vector.
    pub fn appearance(&self) -> Vec<f64> {
        let mut v = vec![self.center[0], self.center[1], self.radii[0], self.radii[1]];
        v.extend_from_slice(&self.eye_offset);
        v.push(self.eye_radius);
        v.push(self.mouth_width);
        for c in &self.palette_hsv {
            v.extend_from_slice(c);
        }
        v
    }

    /// Base palette as RGB triples in [0, 1], after an optional hue rotation.
    pub fn palette_rgb(&self, hue_rotation: f64) -> [[f64; 3]; 3] {
        self.palette_hsv.map(|[h, s, v]| hsv_to_rgb((h + hue_rotation).rem_euclid(1.0), s, v))
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub sigma: f64,
    #[serde(default = "yes")]
    pub palette: bool,
    #[serde(default = "yes")]
    pub texture: bool,
}

fn yes() -> bool {
    true
}

impl ShiftConfig {
    pub fn new(sigma: f64) -> Self {
        ShiftConfig { sigma, palette: true, texture: true }
    }

    pub fn none() -> Self {
        Self::new(0.0)
    }

    /// FFHQ-like prior: moderately shifted.
    pub fn mild() -> Self {
        Self::new(0.35)
    }

    /// MetFaces-like prior: heavily shifted.
    pub fn strong() -> Self {
        Self::new(0.9)
    }

    fn hue_rotation(&self) -> f64 {
        if self.palette {
            self.sigma * HUE_SHIFT
        } else {
            0.0
        }
    }

    fn texture_amplitude(&self) -> f64 {
        if self.texture {
            self.sigma * TEXTURE_AMP
        } else {
            0.0
        }
    }
}

fn coverage(q: f64, scale: f64) -> f64 {
    // q is the normalized squared radius; soft edge about one pixel wide
    ((1.0 - q.sqrt()) * scale + 0.5).clamp(0.0, 1.0)
}

fn blend(px: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    for c in 0..3 {
        px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
    }
}

/// Renders one sample of `spec` as a `[3, 32, 32]` image in [-1, 1].
pub fn render_identity_image(spec: &IdentitySpec, sample_seed: u64, shift: &ShiftConfig) -> Tensor<f32> {
    let mut rng = seed::rng(sample_seed);
    let jitter = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
    let light: f64 = rng.random_range(0.8..1.15);
    let light_dir: f64 = rng.random_range(-0.3..0.3);
    let stripe_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let stripe_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.035).unwrap();

    let [skin, feat, bg] = spec.palette_rgb(shift.hue_rotation());
    let amp = shift.texture_amplitude();
    let (cx, cy) = (spec.center[0] + jitter[0], spec.center[1] + jitter[1]);
    let (rx, ry) = (spec.radii[0], spec.radii[1]);
    let eyes = [
        (cx - spec.eye_offset[0], cy - spec.eye_offset[1]),
        (cx + spec.eye_offset[0], cy - spec.eye_offset[1]),
    ];
    let mouth = (cx, cy + 0.45 * ry, spec.mouth_width * rx, 0.9);
    let (sa, ca) = stripe_angle.sin_cos();

    let mut out = Tensor::<f32>::zeros(&IMAGE_SHAPE);
    let hw = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut px = bg.map(|c| c * light);
            let q = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let shade = light * (1.0 - 0.18 * q.min(1.0) + light_dir * (fx - cx) / rx);
            blend(&mut px, skin.map(|c| c * shade), coverage(q, rx.min(ry)));
            for (ex, ey) in eyes {
                let qe = ((fx - ex).powi(2) + (fy - ey).powi(2)) / spec.eye_radius.powi(2);
                blend(&mut px, feat, coverage(qe, spec.eye_radius));
            }
            let qm = ((fx - mouth.0) / mouth.2).powi(2) + ((fy - mouth.1) / mouth.3).powi(2);
            blend(&mut px, feat.map(|c| c * 0.75), coverage(qm, mouth.3));
            let stripe = amp * (std::f64::consts::TAU * (fx * ca + fy * sa) / 6.0 + stripe_phase).sin();
            for (c, v) in px.iter().enumerate() {
                let val = (v + stripe + noise.sample(&mut rng)).clamp(0.0, 1.0);
                out.data_mut()[c * hw + y * IMAGE_SIZE + x] = (val * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

/// Images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn of_class(&self, class: usize) -> Tensor<f32> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
        self.images.select_rows(&idx)
    }

    fn labels_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[self.labels.len()], |i| self.labels[i] as f32)
    }

    fn from_tensors(images: Tensor<f32>, labels: &Tensor<f32>) -> Result<Self> {
        if labels.numel() != images.batch() {
            return Err(Error::Format("label count does not match image count".into()));
        }
        Ok(LabeledImages { images, labels: labels.data().iter().map(|&v| v as usize).collect() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub seed: u64,
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_shape: [usize; 3],
    pub train_size: usize,
    pub test_size: usize,
    pub shift: Option<ShiftConfig>,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivateDataset {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublicDataset {
    pub images: Tensor<f32>,
    pub identity_ids: Vec<u64>,
    pub manifest: DatasetManifest,
}

fn stack_images(images: &[Tensor<f32>]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_LEN);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::new(vec![images.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("image stack")
}

fn private_bytes(train: &LabeledImages, test: &LabeledImages) -> Vec<u8> {
    let (trl, tel) = (train.labels_tensor(), test.labels_tensor());
    io::encode(&[
        ("train.images", &train.images),
        ("train.labels", &trl),
        ("test.images", &test.images),
        ("test.labels", &tel),
    ])
}

fn public_bytes(images: &Tensor<f32>, ids: &[u64]) -> Vec<u8> {
    // offsets from PUBLIC_ID_BASE stay far below 2^24, exact in f32
    let offsets = Tensor::<f32>::from_fn(&[ids.len()], |i| (ids[i] - PUBLIC_ID_BASE) as f32);
    io::encode(&[("images", images), ("identity_offsets", &offsets)])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_verified(tensor_path: &Path, manifest_path: &Path) -> Result<(DatasetManifest, Vec<u8>)> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let bytes = std::fs::read(tensor_path)?;
    let actual = seed::hex_digest(&bytes);
    if actual != manifest.checksum {
        return Err(Error::Checksum {
            path: tensor_path.display().to_string(),
            expected: manifest.checksum.clone(),
            actual,
        });
    }
    Ok((manifest, bytes))
}

impl PrivateDataset {
    pub fn save(&self, tensor_path: &Path, manifest_path: &Path) -> Result<()> {
        std::fs::write(tensor_path, private_bytes(&self.train, &self.test))?;
        write_json(manifest_path, &self.manifest)
    }

    /// Loads a corpus and checks it against its manifest checksum.
    pub fn load(tensor_path: &Path, manifest_path: &Path) -> Result<Self> {
        let (manifest, bytes) = read_verified(tensor_path, manifest_path)?;
        let t = io::decode::<f32>(&bytes)?;
        let train = LabeledImages::from_tensors(io::find(&t, "train.images")?, &io::find(&t, "train.labels")?)?;
        let test = LabeledImages::from_tensors(io::find(&t, "test.images")?, &io::find(&t, "test.labels")?)?;
        Ok(PrivateDataset { train, test, manifest })
    }
}

impl PublicDataset {
    pub fn save(&self, tensor_path: &Path, manifest_path: &Path) -> Result<()> {
        std::fs::write(tensor_path, public_bytes(&self.images, &self.identity_ids))?;
        write_json(manifest_path, &self.manifest)
    }

    pub fn load(tensor_path: &Path, manifest_path: &Path) -> Result<Self> {
        let (manifest, bytes) = read_verified(tensor_path, manifest_path)?;
        let t = io::decode::<f32>(&bytes)?;
        let images = io::find(&t, "images")?;
        let offsets = io::find(&t, "identity_offsets")?;
        let identity_ids = offsets.data().iter().map(|&o| PUBLIC_ID_BASE + o as u64).collect();
        Ok(PublicDataset { images, identity_ids, manifest })
    }
}

/// Builds the labelled private corpus with a stratified 80/20 split.
pub fn make_private_dataset(seed: u64, identities: usize, per_identity: usize) -> Result<PrivateDataset> {
    if identities < 2 {
        return Err(Error::invalid(format!("need at least 2 identities, got {identities}")));
    }
    if per_identity < 20 {
        return Err(Error::invalid(format!(
            "{per_identity} images per identity is too few for an 80/20 split (need >= 20)"
        )));
    }
    let n_train = (per_identity * 4).div_ceil(5);
    let shift = ShiftConfig::none();
    let (mut tr_im, mut tr_lb, mut te_im, mut te_lb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for id in 0..identities {
        let spec = IdentitySpec::generate(seed, id as u64);
        for s in 0..per_identity {
            let sample_seed = seed::derive_indexed(seed, &format!("sample/{id}"), s as u64);
            let img = render_identity_image(&spec, sample_seed, &shift);
            if s < n_train {
                tr_im.push(img);
                tr_lb.push(id);
            } else {
                te_im.push(img);
                te_lb.push(id);
            }
        }
    }
    let train = LabeledImages { images: stack_images(&tr_im), labels: tr_lb };
    let test = LabeledImages { images: stack_images(&te_im), labels: te_lb };
    let checksum = seed::hex_digest(&private_bytes(&train, &test));
    let manifest = DatasetManifest {
        kind: "private".into(),
        seed,
        identities,
        images_per_identity: per_identity,
        image_shape: IMAGE_SHAPE,
        train_size: train.len(),
        test_size: test.len(),
        shift: None,
        checksum,
    };
    Ok(PrivateDataset { train, test, manifest })
}

/// Builds an unlabelled public corpus of `size` fresh identities, one image each.
pub fn make_public_dataset(seed: u64, size: usize, shift: ShiftConfig) -> Result<PublicDataset> {
    if size < 500 {
        return Err(Error::invalid(format!("public corpus needs at least 500 images, got {size}")));
    }
    if !(0.0..=1.0).contains(&shift.sigma) {
        return Err(Error::invalid(format!("shift level {} outside [0, 1]", shift.sigma)));
    }
    let ids: Vec<u64> = (0..size as u64).map(|i| PUBLIC_ID_BASE + i).collect();
    let images: Vec<Tensor<f32>> = ids
        .iter()
        .map(|&id| {
            let spec = IdentitySpec::generate(seed, id);
            render_identity_image(&spec, seed::derive_indexed(seed, "public-sample", id), &shift)
        })
        .collect();
    let images = stack_images(&images);
    let checksum = seed::hex_digest(&public_bytes(&images, &ids));
    let manifest = DatasetManifest {
        kind: "public".into(),
        seed,
        identities: size,
        images_per_identity: 1,
        image_shape: IMAGE_SHAPE,
        train_size: size,
        test_size: 0,
        shift: Some(shift),
        checksum,
    };
    Ok(PublicDataset { images, identity_ids: ids, manifest })
}
