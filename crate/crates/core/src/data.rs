//! Dataset ingestion, the synthetic image generator and member/non-member
//! split construction.
//!
//! Images are stored height-major, channel-last (`H x W x C`) as `f32` in
//! `[0, 1]`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    shape: ImageShape,
    num_classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset, checking every sample against the shape, the pixel
    /// range and the label range.
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        num_classes: usize,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::arg("a dataset needs at least two classes"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != shape.len() {
                return Err(Error::Format(format!(
                    "sample {i} has {} values, expected {} for {:?}",
                    s.image.len(),
                    shape.len(),
                    shape
                )));
            }
            if s.label >= num_classes {
                return Err(Error::Format(format!(
                    "sample {i} has label {} outside [0, {num_classes})",
                    s.label
                )));
            }
            if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("sample {i} has pixels outside [0, 1]")));
            }
        }
        Ok(Self { name: name.into(), shape, num_classes, samples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: usize) -> Result<&Sample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::arg(format!("sample id {id} out of range ({})", self.len())))
    }

    pub fn images(&self, ids: &[usize]) -> Result<Vec<&[f32]>> {
        ids.iter().map(|&id| self.get(id).map(|s| s.image.as_slice())).collect()
    }

    pub fn labels(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter().map(|&id| self.get(id).map(|s| s.label)).collect()
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_FILES: [&str; 6] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
    "test_batch.bin",
];

/// Loads a dataset from disk.
///
/// Accepted sources:
/// - a CIFAR-10 binary directory (`data_batch_{1..5}.bin`, `test_batch.bin`)
///   or a single CIFAR-10 `.bin` batch file;
/// - a class-folder directory: one sub-directory per class (sorted by name
///   to give class indices), each holding PNG/JPEG images of one fixed size.
///
/// Samples are ordered by file order, then record or file-name order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let load_err = |reason: String| Error::Load { path: path.to_path_buf(), reason };
    if !path.exists() {
        return Err(load_err("no such file or directory".into()));
    }
    if path.is_file() {
        let samples = read_cifar_batch(path)?;
        return Dataset::new(
            "cifar10",
            ImageShape::new(CIFAR_SIDE, CIFAR_SIDE, 3),
            10,
            samples,
        );
    }
    if path.join(CIFAR_FILES[0]).is_file() {
        let mut samples = Vec::with_capacity(60_000);
        for file in CIFAR_FILES {
            let p = path.join(file);
            if p.is_file() {
                samples.extend(read_cifar_batch(&p)?);
            }
        }
        return Dataset::new("cifar10", ImageShape::new(CIFAR_SIDE, CIFAR_SIDE, 3), 10, samples);
    }
    load_class_folders(path)
}

fn read_cifar_batch(path: &Path) -> Result<Vec<Sample>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of the {CIFAR_RECORD}-byte CIFAR record",
            path.display(),
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    Ok(bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            let label = rec[0] as usize;
            let pixels = &rec[1..];
            // planar RGB -> interleaved HWC
            let mut image = Vec::with_capacity(3 * plane);
            for i in 0..plane {
                for c in 0..3 {
                    image.push(f32::from(pixels[c * plane + i]) / 255.0);
                }
            }
            Sample { image, label }
        })
        .collect())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn load_class_folders(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> =
        sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Load {
            path: root.to_path_buf(),
            reason: "no class sub-directories or CIFAR batches found".into(),
        });
    }
    let mut shape: Option<ImageShape> = None;
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let img = image::open(&file)
                .map_err(|e| Error::Load { path: file.clone(), reason: e.to_string() })?
                .to_rgb8();
            let this = ImageShape::new(img.height() as usize, img.width() as usize, 3);
            match shape {
                None => shape = Some(this),
                Some(s) if s != this => {
                    return Err(Error::Format(format!(
                        "{} is {:?}, earlier images are {:?}",
                        file.display(),
                        this,
                        s
                    )))
                }
                _ => {}
            }
            let image = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
            samples.push(Sample { image, label });
        }
    }
    let shape = shape.ok_or_else(|| Error::Load {
        path: root.to_path_buf(),
        reason: "class directories contain no images".into(),
    })?;
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, shape, class_dirs.len().max(2), samples)
}

/// Knobs of the synthetic generator. `contrast` scales the per-class base
/// pattern around mid-grey, `noise_std` is the per-pixel Gaussian noise and
/// `blend` the largest weight of another class's pattern mixed into a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub hw: usize,
    pub channels: usize,
    pub contrast: f32,
    pub noise_std: f32,
    #[serde(default)]
    pub blend: f32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_classes: usize, n_per_class: usize, hw: usize, seed: u64) -> Self {
        Self { num_classes, n_per_class, hw, channels: 3, contrast: 0.12, noise_std: 0.25, blend: 0.0, seed }
    }
}

/// Class-conditional synthetic images with the default generator knobs.
pub fn synth_dataset(num_classes: usize, n_per_class: usize, hw: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(&SynthConfig::new(num_classes, n_per_class, hw, seed))
}

/// Each class owns a smooth base pattern (a random 4x4 grid upsampled
/// bilinearly); every sample is its class pattern, optionally blended with a
/// random other class's pattern at a weight drawn from `[0, blend)`, plus
/// i.i.d. Gaussian pixel noise, clipped to `[0, 1]`. Sample `i` of class `c`
/// has id `c * n + i`.
pub fn synth_dataset_with(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.n_per_class < 1 || cfg.hw < 8 || cfg.channels < 1 {
        return Err(Error::arg(format!(
            "synthetic dataset needs num_classes >= 2, n_per_class >= 1, hw >= 8, channels >= 1 (got {cfg:?})"
        )));
    }
    if !(cfg.noise_std >= 0.0) || !(cfg.contrast >= 0.0) {
        return Err(Error::arg("contrast and noise_std must be non-negative"));
    }
    if !(0.0..0.5).contains(&cfg.blend) {
        return Err(Error::arg(format!("blend must lie in [0, 0.5), got {}", cfg.blend)));
    }
    let shape = ImageShape::new(cfg.hw, cfg.hw, cfg.channels);
    const GRID: usize = 4;
    let patterns: Vec<Vec<f32>> = (0..cfg.num_classes)
        .map(|c| {
            let mut rng = seed::rng(cfg.seed, "synth-class", c as u64);
            let coarse: Vec<f32> =
                (0..GRID * GRID * cfg.channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            upsample_bilinear(&coarse, GRID, cfg.hw, cfg.channels)
                .into_iter()
                .map(|v| 0.5 + cfg.contrast * v)
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0f32, cfg.noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::arg(e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.num_classes * cfg.n_per_class);
    for (label, base) in patterns.iter().enumerate() {
        for i in 0..cfg.n_per_class {
            let id = (label * cfg.n_per_class + i) as u64;
            let mut rng = seed::rng(cfg.seed, "synth-sample", id);
            let (weight, other) = if cfg.blend > 0.0 {
                let o = (label + rng.random_range(1..cfg.num_classes)) % cfg.num_classes;
                (rng.random_range(0.0..cfg.blend), o)
            } else {
                (0.0, label)
            };
            let image = base
                .iter()
                .zip(&patterns[other])
                .map(|(&b, &o)| {
                    let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    ((1.0 - weight) * b + weight * o + n).clamp(0.0, 1.0)
                })
                .collect();
            samples.push(Sample { image, label });
        }
    }
    let name = format!(
        "synth-{}x{}-hw{}-s{}",
        cfg.num_classes, cfg.n_per_class, cfg.hw, cfg.seed
    );
    Dataset::new(name, shape, cfg.num_classes, samples)
}

fn upsample_bilinear(coarse: &[f32], grid: usize, hw: usize, channels: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(hw * hw * channels);
    let scale = (grid - 1) as f32 / (hw - 1) as f32;
    for y in 0..hw {
        let fy = y as f32 * scale;
        let y0 = (fy.floor() as usize).min(grid - 2);
        let wy = fy - y0 as f32;
        for x in 0..hw {
            let fx = x as f32 * scale;
            let x0 = (fx.floor() as usize).min(grid - 2);
            let wx = fx - x0 as f32;
            for c in 0..channels {
                let at = |yy: usize, xx: usize| coarse[(yy * grid + xx) * channels + c];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x0 + 1) * wx;
                let bottom = at(y0 + 1, x0) * (1.0 - wx) + at(y0 + 1, x0 + 1) * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    out
}

/// Sizes for [`make_splits`]. `eval_count` is the total evaluation size and
/// is split evenly between members and non-members; defender and attacker
/// counts are per side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub member_count: usize,
    pub defender_count: usize,
    pub attacker_count: usize,
    pub eval_count: usize,
    /// Let the defender's calibration samples coincide with the attacker's
    /// known samples. Off by default.
    #[serde(default)]
    pub defender_attacker_overlap: bool,
}

impl SplitCounts {
    pub fn new(member_count: usize, defender_count: usize, attacker_count: usize, eval_count: usize) -> Self {
        Self { member_count, defender_count, attacker_count, eval_count, defender_attacker_overlap: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub member_ids: Vec<usize>,
    pub nonmember_ids: Vec<usize>,
    pub defender_member_ids: Vec<usize>,
    pub defender_nonmember_ids: Vec<usize>,
    pub attacker_known_member_ids: Vec<usize>,
    pub attacker_known_nonmember_ids: Vec<usize>,
    pub eval_member_ids: Vec<usize>,
    pub eval_nonmember_ids: Vec<usize>,
    pub seed: u64,
}

/// Seeded partition of a dataset into members and non-members, then into
/// evaluation, attacker-known and defender subsets on each side.
pub fn make_splits(dataset: &Dataset, counts: SplitCounts, seed: u64) -> Result<SplitSpec> {
    make_splits_for_len(dataset.len(), counts, seed)
}

pub fn make_splits_for_len(n: usize, counts: SplitCounts, seed: u64) -> Result<SplitSpec> {
    let SplitCounts { member_count, defender_count, attacker_count, eval_count, defender_attacker_overlap } =
        counts;
    if member_count == 0 || defender_count == 0 || attacker_count == 0 || eval_count == 0 {
        return Err(Error::arg(format!("split counts must be positive: {counts:?}")));
    }
    if eval_count % 2 != 0 {
        return Err(Error::arg(format!("eval_count {eval_count} must be even for balanced evaluation")));
    }
    if member_count >= n {
        return Err(Error::arg(format!(
            "member_count {member_count} leaves no non-members in a dataset of {n}"
        )));
    }
    let per_side_eval = eval_count / 2;
    let reserved = if defender_attacker_overlap {
        per_side_eval + attacker_count.max(defender_count)
    } else {
        per_side_eval + attacker_count + defender_count
    };
    if reserved > member_count || reserved > n - member_count {
        return Err(Error::arg(format!(
            "each side needs {reserved} samples for eval/attacker/defender subsets but there are {member_count} members and {} non-members",
            n - member_count
        )));
    }

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, "split", 0));
    let (members, nonmembers) = perm.split_at(member_count);

    let carve = |side: &[usize]| {
        let eval = side[..per_side_eval].to_vec();
        let attacker = side[per_side_eval..per_side_eval + attacker_count].to_vec();
        let defender_start = if defender_attacker_overlap { per_side_eval } else { per_side_eval + attacker_count };
        let defender = side[defender_start..defender_start + defender_count].to_vec();
        (eval, attacker, defender)
    };
    let (eval_m, attacker_m, defender_m) = carve(members);
    let (eval_n, attacker_n, defender_n) = carve(nonmembers);

    let split = SplitSpec {
        member_ids: members.to_vec(),
        nonmember_ids: nonmembers.to_vec(),
        defender_member_ids: defender_m,
        defender_nonmember_ids: defender_n,
        attacker_known_member_ids: attacker_m,
        attacker_known_nonmember_ids: attacker_n,
        eval_member_ids: eval_m,
        eval_nonmember_ids: eval_n,
        seed,
    };
    split.validate()?;
    Ok(split)
}

impl SplitSpec {
    /// Checks the disjointness and containment invariants.
    pub fn validate(&self) -> Result<()> {
        let set = |v: &[usize]| v.iter().copied().collect::<HashSet<_>>();
        let members = set(&self.member_ids);
        let nonmembers = set(&self.nonmember_ids);
        let fail = |what: &str| Err(Error::Format(format!("split invariant violated: {what}")));
        if !members.is_disjoint(&nonmembers) {
            return fail("members and non-members overlap");
        }
        let subset = |ids: &[usize], of: &HashSet<usize>| ids.iter().all(|i| of.contains(i));
        if !subset(&self.defender_member_ids, &members)
            || !subset(&self.attacker_known_member_ids, &members)
            || !subset(&self.eval_member_ids, &members)
        {
            return fail("member-side subset contains a non-member");
        }
        if !subset(&self.defender_nonmember_ids, &nonmembers)
            || !subset(&self.attacker_known_nonmember_ids, &nonmembers)
            || !subset(&self.eval_nonmember_ids, &nonmembers)
        {
            return fail("non-member-side subset contains a member");
        }
        let eval: HashSet<usize> = self.eval_ids().into_iter().collect();
        let known = set(&self.attacker_known_member_ids)
            .union(&set(&self.attacker_known_nonmember_ids))
            .copied()
            .collect::<HashSet<_>>();
        if !eval.is_disjoint(&known) {
            return fail("eval ids intersect attacker-known ids");
        }
        let defender = set(&self.defender_member_ids)
            .union(&set(&self.defender_nonmember_ids))
            .copied()
            .collect::<HashSet<_>>();
        if !eval.is_disjoint(&defender) {
            return fail("eval ids intersect defender ids");
        }
        if self.eval_member_ids.len() != self.eval_nonmember_ids.len() {
            return fail("unbalanced evaluation lists");
        }
        Ok(())
    }

    /// Eval members followed by eval non-members.
    pub fn eval_ids(&self) -> Vec<usize> {
        self.eval_member_ids.iter().chain(&self.eval_nonmember_ids).copied().collect()
    }

    pub fn eval_membership(&self) -> Vec<bool> {
        std::iter::repeat_n(true, self.eval_member_ids.len())
            .chain(std::iter::repeat_n(false, self.eval_nonmember_ids.len()))
            .collect()
    }

    pub fn hash(&self) -> String {
        let mut all = Vec::new();
        for list in [
            &self.member_ids,
            &self.nonmember_ids,
            &self.defender_member_ids,
            &self.defender_nonmember_ids,
            &self.attacker_known_member_ids,
            &self.attacker_known_nonmember_ids,
            &self.eval_member_ids,
            &self.eval_nonmember_ids,
        ] {
            all.push(usize::MAX);
            all.extend_from_slice(list);
        }
        all.push(self.seed as usize);
        seed::hash_ids(&all)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let split: SplitSpec = serde_json::from_str(text)?;
        split.validate()?;
        Ok(split)
    }
}
