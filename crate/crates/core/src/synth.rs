//! Procedural binary-silhouette walking sequences.
//!
//! Each identity is a fixed set of body-geometry and gait parameters drawn
//! once from a seeded generator; each sequence renders an articulated blob
//! (torso plus two counter-swinging leg ellipses) and then applies a
//! confounder: an attached bag blob, a coat (morphological dilation), salt
//! noise, or an occluding band. Rendering is binary with no anti-aliasing,
//! and every sample is a pure function of (specs, seed).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

/// Body geometry and gait motion of one identity, in unit coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub label: usize,
    /// Torso extent as a fraction of frame height/width.
    pub torso_height: f64,
    pub torso_width: f64,
    /// Leg length as a fraction of frame height, and swing amplitude (rad).
    pub limb_length: f64,
    pub limb_amplitude: f64,
    /// Gait cycles per frame and base phase.
    pub frequency: f64,
    pub phase: f64,
}

const TORSO_H: (f64, f64) = (0.30, 0.42);
const TORSO_W: (f64, f64) = (0.16, 0.30);
const LIMB_LEN: (f64, f64) = (0.26, 0.38);
const LIMB_AMP: (f64, f64) = (0.15, 0.45);
const FREQ: (f64, f64) = (0.05, 0.15);

impl IdentitySpec {
    /// Draw an identity from its own seeded stream, independent of how many
    /// sequences are later rendered for it.
    pub fn sample(label: usize, master_seed: u64) -> IdentitySpec {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master_seed, label as u64, u64::MAX));
        IdentitySpec {
            label,
            torso_height: rng.gen_range(TORSO_H.0..TORSO_H.1),
            torso_width: rng.gen_range(TORSO_W.0..TORSO_W.1),
            limb_length: rng.gen_range(LIMB_LEN.0..LIMB_LEN.1),
            limb_amplitude: rng.gen_range(LIMB_AMP.0..LIMB_AMP.1),
            frequency: rng.gen_range(FREQ.0..FREQ.1),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("torso_height", self.torso_height, TORSO_H),
            ("torso_width", self.torso_width, TORSO_W),
            ("limb_length", self.limb_length, LIMB_LEN),
            ("limb_amplitude", self.limb_amplitude, LIMB_AMP),
            ("frequency", self.frequency, FREQ),
        ];
        for (name, v, (lo, hi)) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Validation(format!(
                    "identity {}: {name}={v} outside [{lo}, {hi}]",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderKind {
    None,
    Bag,
    Coat,
    Noise,
    Occlusion,
}

impl fmt::Display for ConfounderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConfounderKind::None => "none",
            ConfounderKind::Bag => "bag",
            ConfounderKind::Coat => "coat",
            ConfounderKind::Noise => "noise",
            ConfounderKind::Occlusion => "occlusion",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ConfounderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<ConfounderKind> {
        match s {
            "none" => Ok(ConfounderKind::None),
            "bag" => Ok(ConfounderKind::Bag),
            "coat" => Ok(ConfounderKind::Coat),
            "noise" => Ok(ConfounderKind::Noise),
            "occlusion" => Ok(ConfounderKind::Occlusion),
            other => Err(Error::Format(format!("unknown confounder kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfounderSpec {
    pub kind: ConfounderKind,
    /// In [0, 1]; ignored for `None`.
    pub intensity: f64,
    pub seed: u64,
}

impl ConfounderSpec {
    pub fn none() -> ConfounderSpec {
        ConfounderSpec {
            kind: ConfounderKind::None,
            intensity: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ConfounderKind::None && !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Validation(format!(
                "confounder intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// One rendered sequence: binary frames plus labels.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// [T, H, W] with values in {0, 1}.
    pub frames: Tensor,
    pub identity: usize,
    pub sequence: usize,
    pub confounder: ConfounderSpec,
}

impl SyntheticSample {
    /// View as the single-channel backbone input [T, 1, H, W].
    pub fn as_input(&self) -> Tensor {
        let s = self.frames.shape();
        self.frames
            .clone()
            .reshape(&[s[0], 1, s[1], s[2]])
            .expect("rank-3 frames")
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style avalanche over (seed, a, b)
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fill_ellipse(frame: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) {
    let y0 = ((cy - ry) * h as f64).floor().max(0.0) as usize;
    let y1 = (((cy + ry) * h as f64).ceil() as usize).min(h);
    let x0 = ((cx - rx) * w as f64).floor().max(0.0) as usize;
    let x1 = (((cx + rx) * w as f64).ceil() as usize).min(w);
    for y in y0..y1 {
        let uy = (y as f64 + 0.5) / h as f64;
        for x in x0..x1 {
            let ux = (x as f64 + 0.5) / w as f64;
            let dy = (uy - cy) / ry;
            let dx = (ux - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                frame[y * w + x] = 1.0;
            }
        }
    }
}

/// Rotated capsule-like leg: ellipse with the major axis from `hip` towards
/// `hip + len * (sin a, cos a)` in unit coordinates (y grows downward).
fn fill_leg(frame: &mut [f64], h: usize, w: usize, hip: (f64, f64), len: f64, angle: f64, width: f64) {
    let (hy, hx) = hip;
    let dir = (angle.cos(), angle.sin()); // (dy, dx) unit, angle from vertical
    let cy = hy + dir.0 * len / 2.0;
    let cx = hx + dir.1 * len / 2.0;
    let a = len / 2.0;
    for y in 0..h {
        let uy = (y as f64 + 0.5) / h as f64;
        if (uy - cy).abs() > a + width {
            continue;
        }
        for x in 0..w {
            let ux = (x as f64 + 0.5) / w as f64;
            let py = uy - cy;
            let px = ux - cx;
            let u = (py * dir.0 + px * dir.1) / a;
            let v = (px * dir.0 - py * dir.1) / width;
            if u * u + v * v <= 1.0 {
                frame[y * w + x] = 1.0;
            }
        }
    }
}

fn dilate(frame: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if frame[y as usize * w + x as usize] < 0.5 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out[ny as usize * w + nx as usize] = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Render one sequence. Deterministic in (specs, seed); the seed drives the
/// per-sequence phase offset, the horizontal jitter and the noise stream.
pub fn generate_sequence(
    id_spec: &IdentitySpec,
    conf: &ConfounderSpec,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<SyntheticSample> {
    id_spec.validate()?;
    conf.validate()?;
    if t == 0 || h < 8 || w < 8 {
        return Err(Error::Validation(format!(
            "frame geometry T={t}, H={h}, W={w} too small"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase0 = id_spec.phase + rng.gen_range(0.0..std::f64::consts::TAU);
    let cx = 0.5 + rng.gen_range(-0.03..0.03);
    let noise_seed = rng.gen::<u64>();

    let mut frames = Tensor::zeros(&[t, h, w]);
    let torso_cy = 0.08 + id_spec.torso_height / 2.0;
    let hip_y = 0.08 + id_spec.torso_height * 0.92;
    let leg_w = 0.045;
    for ti in 0..t {
        let frame = &mut frames.data_mut()[ti * h * w..(ti + 1) * h * w];
        let swing = id_spec.limb_amplitude
            * (std::f64::consts::TAU * id_spec.frequency * ti as f64 + phase0).sin();
        fill_ellipse(
            frame,
            h,
            w,
            torso_cy,
            cx,
            id_spec.torso_height / 2.0,
            id_spec.torso_width / 2.0,
        );
        fill_leg(frame, h, w, (hip_y, cx), id_spec.limb_length, swing, leg_w);
        fill_leg(frame, h, w, (hip_y, cx), id_spec.limb_length, -swing, leg_w);
    }

    apply_confounder(&mut frames, conf, noise_seed, id_spec, cx)?;

    for (ti, chunk) in frames.data().chunks(h * w).enumerate() {
        if !chunk.iter().any(|&v| v > 0.5) {
            return Err(Error::Validation(format!(
                "frame {ti} rendered empty; identity {:?}",
                id_spec.label
            )));
        }
    }
    Ok(SyntheticSample {
        frames,
        identity: id_spec.label,
        sequence: 0,
        confounder: *conf,
    })
}

fn apply_confounder(
    frames: &mut Tensor,
    conf: &ConfounderSpec,
    noise_seed: u64,
    id_spec: &IdentitySpec,
    cx: f64,
) -> Result<()> {
    let (t, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    match conf.kind {
        ConfounderKind::None => {}
        ConfounderKind::Bag => {
            // Blob attached at mid-torso, protruding sideways past the torso.
            let r = 0.035 + 0.05 * conf.intensity;
            let by = 0.08 + id_spec.torso_height * 0.6;
            let bx = cx + id_spec.torso_width / 2.0 + r * 0.6;
            for ti in 0..t {
                let frame = &mut frames.data_mut()[ti * h * w..(ti + 1) * h * w];
                fill_ellipse(frame, h, w, by, bx, r, r);
            }
        }
        ConfounderKind::Coat => {
            let radius = (3.0 * conf.intensity).ceil() as usize;
            if radius > 0 {
                for ti in 0..t {
                    let range = ti * h * w..(ti + 1) * h * w;
                    let dilated = dilate(&frames.data()[range.clone()], h, w, radius);
                    frames.data_mut()[range].copy_from_slice(&dilated);
                }
            }
        }
        ConfounderKind::Noise => {
            let p = 0.12 * conf.intensity;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            for v in frames.data_mut() {
                if *v < 0.5 && rng.gen::<f64>() < p {
                    *v = 1.0;
                }
            }
        }
        ConfounderKind::Occlusion => {
            // Horizontal zeroed band over the lower torso / upper legs.
            let band = ((0.22 * conf.intensity * h as f64).round() as usize).min(h / 4);
            let y0 = (0.30 * h as f64) as usize;
            for ti in 0..t {
                for y in y0..(y0 + band).min(h) {
                    for v in
                        &mut frames.data_mut()[(ti * h + y) * w..(ti * h + y + 1) * w]
                    {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub sequences_per_identity: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Cycled over the non-clean sequences of each identity.
    pub confounders: Vec<ConfounderKind>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            train_identities: 40,
            test_identities: 20,
            sequences_per_identity: 4,
            frames: 30,
            height: 64,
            width: 44,
            confounders: vec![
                ConfounderKind::Bag,
                ConfounderKind::Coat,
                ConfounderKind::Noise,
                ConfounderKind::Occlusion,
            ],
            seed: 0,
        }
    }
}

/// Train / gallery / probe splits with disjoint identity sets. The gallery
/// holds the clean sequence of each test identity; the probes are the
/// confounded ones.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub gallery: Vec<SyntheticSample>,
    pub probe: Vec<SyntheticSample>,
    pub config: DatasetConfig,
}

fn sequence_conf(cfg: &DatasetConfig, id: usize, seq: usize) -> ConfounderSpec {
    if seq == 0 || cfg.confounders.is_empty() {
        return ConfounderSpec::none();
    }
    let kind = cfg.confounders[(seq - 1) % cfg.confounders.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, id as u64, 0xC0FF_EE00 + seq as u64));
    ConfounderSpec {
        kind,
        intensity: rng.gen_range(0.3..0.7),
        seed: rng.gen(),
    }
}

fn render_one(cfg: &DatasetConfig, id: usize, seq: usize) -> Result<SyntheticSample> {
    let spec = IdentitySpec::sample(id, cfg.seed);
    let conf = sequence_conf(cfg, id, seq);
    let mut sample = generate_sequence(
        &spec,
        &conf,
        cfg.frames,
        cfg.height,
        cfg.width,
        mix_seed(cfg.seed, id as u64, seq as u64),
    )?;
    sample.sequence = seq;
    Ok(sample)
}

/// Build the full dataset in memory. Sequences are independent of each other,
/// so generation fans out when the `parallel` feature is enabled.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_identities < 2 || cfg.test_identities < 2 {
        return Err(Error::Validation(
            "each split needs at least 2 identities".into(),
        ));
    }
    if cfg.sequences_per_identity < 1 {
        return Err(Error::Validation("at least one sequence per identity".into()));
    }
    let total_ids = cfg.train_identities + cfg.test_identities;
    let jobs: Vec<(usize, usize)> = (0..total_ids)
        .flat_map(|id| (0..cfg.sequences_per_identity).map(move |s| (id, s)))
        .collect();

    #[cfg(feature = "parallel")]
    let rendered: Result<Vec<SyntheticSample>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(id, s)| render_one(cfg, id, s)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rendered: Result<Vec<SyntheticSample>> =
        jobs.iter().map(|&(id, s)| render_one(cfg, id, s)).collect();

    let mut train = Vec::new();
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for sample in rendered? {
        if sample.identity < cfg.train_identities {
            train.push(sample);
        } else if sample.sequence == 0 {
            gallery.push(sample);
        } else {
            probe.push(sample);
        }
    }
    Ok(Dataset {
        train,
        gallery,
        probe,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// On-disk layout: PGM frames + line-oriented manifest
// ---------------------------------------------------------------------------

/// Binary P5 PGM, foreground 255 / background 0.
pub fn write_pgm(path: &Path, frame: &[f64], h: usize, w: usize) -> Result<()> {
    let mut buf = Vec::with_capacity(h * w + 32);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    buf.extend(frame.iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    // magic, dims, maxval (whitespace separated, no comment support needed
    // for files we wrote ourselves)
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if !header.is_empty() {
                fields.push(String::from_utf8_lossy(&header).to_string());
                header.clear();
            }
        } else {
            header.push(byte[0]);
        }
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("{path:?}: not a P5 PGM")));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    let mut raw = vec![0u8; h * w];
    reader.read_exact(&mut raw)?;
    Ok((
        raw.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect(),
        h,
        w,
    ))
}

fn sample_dir(id: usize, seq: usize) -> String {
    format!("{id:03}/{seq:02}")
}

/// Write frames as `<root>/<id>/<seq>/frame_%04d.pgm` plus `manifest.txt`
/// with one `id<TAB>seq<TAB>kind<TAB>intensity<TAB>path` line per sequence.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "# synthetic gait dataset\n# train_identities={} test_identities={} sequences_per_identity={} frames={} height={} width={} seed={}\n",
        ds.config.train_identities,
        ds.config.test_identities,
        ds.config.sequences_per_identity,
        ds.config.frames,
        ds.config.height,
        ds.config.width,
        ds.config.seed
    ));
    if ds.config.confounders.is_empty() {
        manifest.push_str("# probe_matches_gallery_distribution=true\n");
    }
    let (h, w) = (ds.config.height, ds.config.width);
    for sample in ds.train.iter().chain(&ds.gallery).chain(&ds.probe) {
        let rel = sample_dir(sample.identity, sample.sequence);
        let dir = root.join(&rel);
        std::fs::create_dir_all(&dir)?;
        for ti in 0..ds.config.frames {
            let frame = &sample.frames.data()[ti * h * w..(ti + 1) * h * w];
            write_pgm(&dir.join(format!("frame_{ti:04}.pgm")), frame, h, w)?;
        }
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{}\n",
            sample.identity, sample.sequence, sample.confounder.kind, sample.confounder.intensity, rel
        ));
    }
    let mut f = std::fs::File::create(root.join("manifest.txt"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Load a dataset previously written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.txt");
    let file = std::fs::File::open(&manifest_path)?;
    let mut cfg = DatasetConfig::default();
    let mut entries: Vec<(usize, usize, ConfounderKind, f64, PathBuf)> = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            for kv in rest.split_whitespace() {
                if let Some((k, v)) = kv.split_once('=') {
                    match k {
                        "train_identities" => cfg.train_identities = parse_field(v)?,
                        "test_identities" => cfg.test_identities = parse_field(v)?,
                        "sequences_per_identity" => {
                            cfg.sequences_per_identity = parse_field(v)?
                        }
                        "frames" => cfg.frames = parse_field(v)?,
                        "height" => cfg.height = parse_field(v)?,
                        "width" => cfg.width = parse_field(v)?,
                        "seed" => cfg.seed = parse_field(v)?,
                        _ => {}
                    }
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::Format(format!("manifest line {line:?}")));
        }
        entries.push((
            parse_field(parts[0])?,
            parse_field(parts[1])?,
            parts[2].parse()?,
            parts[3]
                .parse()
                .map_err(|_| Error::Format("bad intensity".into()))?,
            root.join(parts[4]),
        ));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut ds = Dataset {
        train: Vec::new(),
        gallery: Vec::new(),
        probe: Vec::new(),
        config: cfg.clone(),
    };
    for (id, seq, kind, intensity, dir) in entries {
        let mut frames = Tensor::zeros(&[cfg.frames, h, w]);
        for ti in 0..cfg.frames {
            let (pixels, fh, fw) = read_pgm(&dir.join(format!("frame_{ti:04}.pgm")))?;
            if (fh, fw) != (h, w) {
                return Err(Error::Format(format!(
                    "frame {ti} of {id}/{seq} is {fh}x{fw}, expected {h}x{w}"
                )));
            }
            frames.data_mut()[ti * h * w..(ti + 1) * h * w].copy_from_slice(&pixels);
        }
        let sample = SyntheticSample {
            frames,
            identity: id,
            sequence: seq,
            confounder: ConfounderSpec {
                kind,
                intensity,
                seed: 0,
            },
        };
        if id < cfg.train_identities {
            ds.train.push(sample);
        } else if seq == 0 {
            ds.gallery.push(sample);
        } else {
            ds.probe.push(sample);
        }
    }
    Ok(ds)
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad manifest field {s:?}")))
}

/// Per-frame foreground pixel counts.
pub fn foreground_areas(sample: &SyntheticSample) -> Vec<usize> {
    let (t, h, w) = (
        sample.frames.shape()[0],
        sample.frames.shape()[1],
        sample.frames.shape()[2],
    );
    (0..t)
        .map(|ti| {
            sample.frames.data()[ti * h * w..(ti + 1) * h * w]
                .iter()
                .filter(|&&v| v > 0.5)
                .count()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id0() -> IdentitySpec {
        IdentitySpec::sample(0, 99)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sequence(&id0(), &ConfounderSpec::none(), 5, 64, 44, 7).unwrap();
        let b = generate_sequence(&id0(), &ConfounderSpec::none(), 5, 64, 44, 7).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
    }

    #[test]
    fn frames_are_binary_with_nonzero_foreground() {
        let s = generate_sequence(&id0(), &ConfounderSpec::none(), 8, 64, 44, 3).unwrap();
        assert!(s.frames.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for area in foreground_areas(&s) {
            assert!(area > 0);
        }
    }

    #[test]
    fn bag_strictly_increases_every_frame_area() {
        let clean = generate_sequence(&id0(), &ConfounderSpec::none(), 6, 64, 44, 11).unwrap();
        let bag = ConfounderSpec {
            kind: ConfounderKind::Bag,
            intensity: 0.5,
            seed: 5,
        };
        let bagged = generate_sequence(&id0(), &bag, 6, 64, 44, 11).unwrap();
        for (a, b) in foreground_areas(&clean).iter().zip(foreground_areas(&bagged)) {
            assert!(b > *a, "bag area {b} not greater than clean {a}");
        }
    }

    #[test]
    fn coat_and_noise_add_pixels_occlusion_removes() {
        let clean = generate_sequence(&id0(), &ConfounderSpec::none(), 4, 64, 44, 13).unwrap();
        let total = |s: &SyntheticSample| foreground_areas(s).iter().sum::<usize>();
        for (kind, grows) in [
            (ConfounderKind::Coat, true),
            (ConfounderKind::Noise, true),
            (ConfounderKind::Occlusion, false),
        ] {
            let conf = ConfounderSpec {
                kind,
                intensity: 0.6,
                seed: 17,
            };
            let modified = generate_sequence(&id0(), &conf, 4, 64, 44, 13).unwrap();
            if grows {
                assert!(total(&modified) > total(&clean), "{kind} should add pixels");
            } else {
                assert!(total(&modified) < total(&clean), "{kind} should remove pixels");
            }
        }
    }

    #[test]
    fn out_of_range_spec_is_rejected() {
        let mut bad = id0();
        bad.torso_width = 0.9;
        assert!(matches!(
            generate_sequence(&bad, &ConfounderSpec::none(), 2, 64, 44, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dataset_split_counts_match_contract() {
        let cfg = DatasetConfig {
            train_identities: 40,
            test_identities: 20,
            sequences_per_identity: 4,
            frames: 2,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.train.len(), 160);
        assert_eq!(ds.gallery.len(), 20);
        assert_eq!(ds.probe.len(), 60);
        // Disjoint identity sets.
        assert!(ds.train.iter().all(|s| s.identity < 40));
        assert!(ds.gallery.iter().all(|s| s.identity >= 40));
        assert!(ds.probe.iter().all(|s| (40..60).contains(&s.identity)));
        assert!(ds.gallery.iter().all(|s| s.confounder.kind == ConfounderKind::None));
        assert!(ds.probe.iter().all(|s| s.confounder.kind != ConfounderKind::None));
    }

    #[test]
    fn empty_confounder_list_makes_probe_clean() {
        let cfg = DatasetConfig {
            train_identities: 2,
            test_identities: 2,
            sequences_per_identity: 2,
            frames: 2,
            confounders: vec![],
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        assert!(ds.probe.iter().all(|s| s.confounder.kind == ConfounderKind::None));
    }

    #[test]
    fn dataset_rebuild_is_bit_identical() {
        let cfg = DatasetConfig {
            train_identities: 3,
            test_identities: 2,
            sequences_per_identity: 2,
            frames: 3,
            seed: 42,
            ..DatasetConfig::default()
        };
        let a = build_dataset(&cfg).unwrap();
        let b = build_dataset(&cfg).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.frames.data(), y.frames.data());
        }
    }

    #[test]
    fn identity_area_variance_exceeds_sequence_variance() {
        // Between-identity variation of clean-sequence mean areas should
        // dominate within-identity variation.
        let cfg = DatasetConfig {
            train_identities: 8,
            test_identities: 2,
            sequences_per_identity: 4,
            frames: 10,
            confounders: vec![],
            seed: 5,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let mut per_id: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for s in &ds.train {
            let areas = foreground_areas(s);
            let mean = areas.iter().sum::<usize>() as f64 / areas.len() as f64;
            per_id.entry(s.identity).or_default().push(mean);
        }
        let id_means: Vec<f64> = per_id
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let grand = id_means.iter().sum::<f64>() / id_means.len() as f64;
        let between =
            id_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / id_means.len() as f64;
        let within = per_id
            .values()
            .flat_map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(move |x| (x - m).powi(2))
            })
            .sum::<f64>()
            / per_id.values().map(|v| v.len()).sum::<usize>() as f64;
        assert!(
            between / within.max(1e-9) > 1.0,
            "between {between} vs within {within}"
        );
    }

    #[test]
    fn pgm_round_trip_and_disk_layout() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            train_identities: 2,
            test_identities: 2,
            sequences_per_identity: 2,
            frames: 2,
            seed: 9,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        write_dataset(tmp.path(), &ds).unwrap();
        assert!(tmp.path().join("000/00/frame_0000.pgm").exists());
        assert!(tmp.path().join("manifest.txt").exists());
        let loaded = load_dataset(tmp.path()).unwrap();
        assert_eq!(loaded.train.len(), ds.train.len());
        assert_eq!(loaded.gallery.len(), ds.gallery.len());
        assert_eq!(loaded.probe.len(), ds.probe.len());
        for (a, b) in ds.train.iter().zip(&loaded.train) {
            assert_eq!(a.frames.data(), b.frames.data());
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.confounder.kind, b.confounder.kind);
        }
    }

    #[test]
    fn manifest_content_is_stable_across_runs() {
        let cfg = DatasetConfig {
            train_identities: 2,
            test_identities: 2,
            sequences_per_identity: 2,
            frames: 2,
            seed: 31,
            ..DatasetConfig::default()
        };
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        write_dataset(t1.path(), &build_dataset(&cfg).unwrap()).unwrap();
        write_dataset(t2.path(), &build_dataset(&cfg).unwrap()).unwrap();
        let m1 = std::fs::read(t1.path().join("manifest.txt")).unwrap();
        let m2 = std::fs::read(t2.path().join("manifest.txt")).unwrap();
        assert_eq!(m1, m2);
    }
}
