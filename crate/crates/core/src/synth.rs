//! Procedural multimodal camouflage scenes, auxiliary misalignment and
//! binary PGM/PPM image I/O.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{resize_tensor, InterpMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_EXTENT: usize = 16;
pub const MIN_FG_FRACTION: f64 = 0.05;
pub const MAX_FG_FRACTION: f64 = 0.4;

/// Amplitude of the mask signal in the auxiliary image.
const AUX_SIGNAL: f64 = 0.6;
const AUX_FLOOR: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub kappa: f64,
    pub snr: f64,
}

/// Tensors are `(C, H, W)`: rgb has 3 channels, the rest 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub rgb: Tensor,
    pub aux: Tensor,
    pub mask: Tensor,
    pub edge: Tensor,
    pub meta: SampleMeta,
}

/// Dataset flavors draw from disjoint seed streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Cos,
    Translation,
}

impl Flavor {
    fn tag(self) -> u64 {
        match self {
            Flavor::Cos => 0x636f73,
            Flavor::Translation => 0x7472616e73,
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Flavor::Cos => "cos",
            Flavor::Translation => "translation",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sample `index` of a flavor.
pub fn sample_seed(seed: u64, flavor: Flavor, index: usize) -> u64 {
    splitmix(splitmix(seed ^ flavor.tag().rotate_left(40)) ^ index as u64)
}

/// Smooth noise: a coarse random grid upsampled bilinearly.
fn texture(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize, cells: usize, amp: f64) -> Result<Tensor> {
    let (gh, gw) = (cells.min(h).max(2), cells.min(w).max(2));
    let coarse = Tensor::uniform(&[1, channels, gh, gw], -amp, amp, rng);
    resize_tensor(&coarse, h, w, InterpMode::Bilinear)
}

fn ellipse_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let count = rng.gen_range(2..=5);
    let (hf, wf) = (h as f64, w as f64);
    let cy = rng.gen_range(0.3..0.7) * hf;
    let cx = rng.gen_range(0.3..0.7) * wf;
    let ellipses: Vec<(f64, f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let ey = cy + rng.gen_range(-0.15..0.15) * hf;
            let ex = cx + rng.gen_range(-0.15..0.15) * wf;
            let ry = rng.gen_range(0.06..0.2) * hf;
            let rx = rng.gen_range(0.06..0.2) * wf;
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            (ey, ex, ry, rx, theta)
        })
        .collect();
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = ellipses.iter().any(|&(ey, ex, ry, rx, t)| {
                let (dy, dx) = (py - ey, px - ex);
                let (c, s) = (t.cos(), t.sin());
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            });
            if inside {
                mask[y * w + x] = 1.0;
            }
        }
    }
    mask
}

/// 3×3 max (`dilate`) or min filter over in-bounds neighbours.
fn morph(mask: &[f64], h: usize, w: usize, dilate: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = if dilate { 0.0 } else { 1.0 };
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let m = mask[ny * w + nx];
                    v = if dilate { f64::max(v, m) } else { f64::min(v, m) };
                }
            }
            out[y * w + x] = v;
        }
    }
    out
}

/// Morphological gradient: 3×3 dilation minus 3×3 erosion.
pub fn morphological_gradient(mask: &[f64], h: usize, w: usize) -> Vec<f64> {
    let d = morph(mask, h, w, true);
    let e = morph(mask, h, w, false);
    d.iter().zip(&e).map(|(a, b)| a - b).collect()
}

/// Separable `[1, 2, 1] / 4` blur with clamped borders.
fn blur121(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let l = x[y * w + xx.saturating_sub(1)];
            let r = x[y * w + (xx + 1).min(w - 1)];
            tmp[y * w + xx] = 0.25 * l + 0.5 * x[y * w + xx] + 0.25 * r;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let u = tmp[y.saturating_sub(1) * w + xx];
            let d = tmp[(y + 1).min(h - 1) * w + xx];
            out[y * w + xx] = 0.25 * u + 0.5 * tmp[y * w + xx] + 0.25 * d;
        }
    }
    out
}

fn check_extent(h: usize, w: usize) -> Result<()> {
    if h < MIN_EXTENT || w < MIN_EXTENT {
        return Err(Error::InvalidDimensions(format!(
            "images must be at least {MIN_EXTENT}x{MIN_EXTENT}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// One scene from its own seed.
pub fn generate_one(seed: u64, h: usize, w: usize, kappa: f64, snr: f64) -> Result<SyntheticSample> {
    check_extent(h, w)?;
    if !(0.0..=1.0).contains(&kappa) || !(snr > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa {kappa} or snr {snr} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = loop {
        let m = ellipse_mask(&mut rng, h, w);
        let frac = m.iter().sum::<f64>() / (h * w) as f64;
        if (MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            break m;
        }
    };
    let plane = h * w;
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.3..0.7)).collect();
    let cells = (h / 8).max(4);
    let bg = texture(&mut rng, 3, h, w, cells, 0.12)?;
    let fg_tex = texture(&mut rng, 3, h, w, cells, 0.12)?;
    let shift: Vec<f64> = base
        .iter()
        .map(|&b| rng.gen_range(0.3..0.45) * if b < 0.5 { 1.0 } else { -1.0 })
        .collect();
    let mut rgb = vec![0.0; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let b = base[c] + bg.data()[c * plane + i];
            let f = base[c] + shift[c] + fg_tex.data()[c * plane + i];
            let v = if mask[i] > 0.5 { kappa * b + (1.0 - kappa) * f } else { b };
            rgb[c * plane + i] = v.clamp(0.0, 1.0);
        }
    }
    let noise = Normal::new(0.0, AUX_SIGNAL / snr).expect("finite noise scale");
    let raw: Vec<f64> = mask
        .iter()
        .map(|&m| AUX_FLOOR + AUX_SIGNAL * m + noise.sample(&mut rng))
        .collect();
    let aux: Vec<f64> = blur121(&raw, h, w).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let edge = morphological_gradient(&mask, h, w);
    Ok(SyntheticSample {
        rgb: Tensor::new(&[3, h, w], rgb)?,
        aux: Tensor::new(&[1, h, w], aux)?,
        mask: Tensor::new(&[1, h, w], mask)?,
        edge: Tensor::new(&[1, h, w], edge)?,
        meta: SampleMeta { seed, kappa, snr },
    })
}

/// `n` scenes of the given flavor; sample `i` depends only on
/// `(seed, flavor, i)` and the scene parameters.
pub fn generate_flavor(
    seed: u64,
    flavor: Flavor,
    n: usize,
    h: usize,
    w: usize,
    kappa: f64,
    snr: f64,
) -> Result<Vec<SyntheticSample>> {
    check_extent(h, w)?;
    (0..n)
        .map(|i| generate_one(sample_seed(seed, flavor, i), h, w, kappa, snr))
        .collect()
}

pub fn generate(seed: u64, n: usize, h: usize, w: usize, kappa: f64, snr: f64) -> Result<Vec<SyntheticSample>> {
    generate_flavor(seed, Flavor::Cos, n, h, w, kappa, snr)
}

/// Crops the top-left `crop_fraction` of the auxiliary image and resizes it
/// back; everything else is untouched.
pub fn misalign(sample: &SyntheticSample, crop_fraction: f64) -> Result<SyntheticSample> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("crop fraction {crop_fraction} outside (0, 1]")));
    }
    let mut out = sample.clone();
    if crop_fraction == 1.0 {
        return Ok(out);
    }
    let (c, h, w) = chw(&sample.aux)?;
    let ch = ((h as f64 * crop_fraction).round() as usize).max(1);
    let cw = ((w as f64 * crop_fraction).round() as usize).max(1);
    let mut crop = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in 0..ch {
            let row = k * h * w + y * w;
            crop.extend_from_slice(&sample.aux.data()[row..row + cw]);
        }
    }
    let crop = Tensor::new(&[1, c, ch, cw], crop)?;
    out.aux = resize_tensor(&crop, h, w, InterpMode::Bilinear)?.reshape(&[c, h, w])?;
    Ok(out)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidDimensions(format!("expected (C, H, W), got {:?}", t.shape()))),
    }
}

/// Writes a `(1, H, W)` tensor as binary PGM or a `(3, H, W)` tensor as
/// binary PPM, quantized to 8 bits.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = chw(t)?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::InvalidDimensions(format!("cannot write {c}-channel image"))),
    };
    if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::DomainError(format!("pixel {v} outside [0, 1]")));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    let plane = h * w;
    let mut bytes = Vec::with_capacity(c * plane);
    for i in 0..plane {
        for k in 0..c {
            bytes.push((t.data()[k * plane + i] * 255.0).round() as u8);
        }
    }
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Header fields after the magic number, skipping whitespace and comments.
fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut pos = 2;
    let mut fields = Vec::with_capacity(count);
    while fields.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedHeader("expected a decimal header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields.push(text.parse().map_err(|_| Error::MalformedHeader(format!("bad number {text}")))?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing whitespace after header".into()));
    }
    Ok((fields, pos + 1))
}

/// Parses binary PGM (`P5`) or PPM (`P6`) bytes into a `(C, H, W)` tensor.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::MalformedHeader("expected P5 or P6".into())),
    };
    let (f, start) = header_fields(bytes, 3)?;
    let (w, h, maxval) = (f[0], f[1], f[2]);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::MalformedHeader(format!("unsupported geometry {w}x{h} max {maxval}")));
    }
    let plane = h * w;
    let body = &bytes[start..];
    if body.len() < c * plane {
        return Err(Error::MalformedHeader(format!(
            "expected {} pixel bytes, found {}",
            c * plane,
            body.len()
        )));
    }
    let mut data = vec![0.0; c * plane];
    for i in 0..plane {
        for k in 0..c {
            data[k * plane + i] = f64::from(body[i * c + k]) / maxval as f64;
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_image(&bytes)
}

/// Parameters and per-sample seeds of a dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub kappa: f64,
    pub snr: f64,
    pub translation_kappa: f64,
    /// Leading cos samples used for training; the rest are the test split.
    pub train: usize,
    pub test: usize,
    pub cos_seeds: Vec<u64>,
    pub translation_seeds: Vec<u64>,
}

/// In-memory dataset: cos scenes split into train and test, plus
/// translation pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
    pub translation: Vec<SyntheticSample>,
}

#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub seed: u64,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    pub translation: usize,
    pub kappa: f64,
    pub snr: f64,
    pub translation_kappa: f64,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let s = spec.size;
        let cos = generate_flavor(spec.seed, Flavor::Cos, spec.train + spec.test, s, s, spec.kappa, spec.snr)?;
        let translation = generate_flavor(
            spec.seed,
            Flavor::Translation,
            spec.translation,
            s,
            s,
            spec.translation_kappa,
            spec.snr,
        )?;
        let manifest = Manifest {
            seed: spec.seed,
            size: s,
            kappa: spec.kappa,
            snr: spec.snr,
            translation_kappa: spec.translation_kappa,
            train: spec.train,
            test: spec.test,
            cos_seeds: cos.iter().map(|c| c.meta.seed).collect(),
            translation_seeds: translation.iter().map(|c| c.meta.seed).collect(),
        };
        let mut train = cos;
        let test = train.split_off(spec.train);
        Ok(Self {
            manifest,
            train,
            test,
            translation,
        })
    }

    /// Writes `<root>/{cos,translation}/{rgb,aux,mask,edge}/NNNNN.(ppm|pgm)`
    /// and `manifest.json`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let cos: Vec<&SyntheticSample> = self.train.iter().chain(&self.test).collect();
        for (flavor, samples) in [(Flavor::Cos, cos), (Flavor::Translation, self.translation.iter().collect())] {
            let dir = root.join(flavor.dir());
            let kinds: &[&str] = match flavor {
                Flavor::Cos => &["rgb", "aux", "mask", "edge"],
                Flavor::Translation => &["rgb", "aux"],
            };
            for k in kinds {
                fs::create_dir_all(dir.join(k))?;
            }
            for (i, s) in samples.iter().enumerate() {
                write_image(&dir.join("rgb").join(format!("{i:05}.ppm")), &s.rgb)?;
                write_image(&dir.join("aux").join(format!("{i:05}.pgm")), &s.aux)?;
                if flavor == Flavor::Cos {
                    write_image(&dir.join("mask").join(format!("{i:05}.pgm")), &s.mask)?;
                    write_image(&dir.join("edge").join(format!("{i:05}.pgm")), &s.edge)?;
                }
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(root.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(root.join("manifest.json"))?)?;
        let load = |flavor: Flavor, i: usize, seed: u64, kappa: f64| -> Result<SyntheticSample> {
            let dir = root.join(flavor.dir());
            let rgb = read_image(&dir.join("rgb").join(format!("{i:05}.ppm")))?;
            let aux = read_image(&dir.join("aux").join(format!("{i:05}.pgm")))?;
            let (mask, edge) = match flavor {
                Flavor::Cos => (
                    read_image(&dir.join("mask").join(format!("{i:05}.pgm")))?,
                    read_image(&dir.join("edge").join(format!("{i:05}.pgm")))?,
                ),
                Flavor::Translation => (Tensor::zeros(aux.shape()), Tensor::zeros(aux.shape())),
            };
            Ok(SyntheticSample {
                rgb,
                aux,
                mask,
                edge,
                meta: SampleMeta {
                    seed,
                    kappa,
                    snr: manifest.snr,
                },
            })
        };
        let mut cos = manifest
            .cos_seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| load(Flavor::Cos, i, s, manifest.kappa))
            .collect::<Result<Vec<_>>>()?;
        let translation = manifest
            .translation_seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| load(Flavor::Translation, i, s, manifest.translation_kappa))
            .collect::<Result<Vec<_>>>()?;
        if cos.len() != manifest.train + manifest.test {
            return Err(Error::Config("manifest split does not match its seeds".into()));
        }
        let test = cos.split_off(manifest.train);
        Ok(Self {
            manifest,
            train: cos,
            test,
            translation,
        })
    }
}

/// Stacks `(C, H, W)` tensors into a `(B, C, H, W)` batch.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let batched: Vec<Tensor> = items
        .iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            (*t).clone().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::cat_batch(&batched)
}

/// Mean absolute difference between the band just inside and the band just
/// outside the mask boundary, averaged over channels.
pub fn boundary_contrast(image: &Tensor, mask: &Tensor) -> Result<f64> {
    let (c, h, w) = chw(image)?;
    let m = mask.data();
    let dil = morph(m, h, w, true);
    let ero = morph(m, h, w, false);
    let inner: Vec<usize> = (0..h * w).filter(|&i| m[i] > 0.5 && ero[i] < 0.5).collect();
    let outer: Vec<usize> = (0..h * w).filter(|&i| m[i] < 0.5 && dil[i] > 0.5).collect();
    if inner.is_empty() || outer.is_empty() {
        return Err(Error::InvalidArgument("mask has no boundary".into()));
    }
    let mut total = 0.0;
    for k in 0..c {
        let plane = &image.data()[k * h * w..(k + 1) * h * w];
        let mi = inner.iter().map(|&i| plane[i]).sum::<f64>() / inner.len() as f64;
        let mo = outer.iter().map(|&i| plane[i]).sum::<f64>() / outer.len() as f64;
        total += (mi - mo).abs();
    }
    Ok(total / c as f64)
}
