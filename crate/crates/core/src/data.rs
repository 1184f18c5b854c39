//! Procedural toy shapes, augmentation and corruption protocols, and cloud IO.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    PlanePair,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Cylinder, ShapeKind::PlanePair];

    /// Class id in the 5-shape classification task.
    pub fn class_id(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).expect("listed")
    }

    /// Number of analytic region labels.
    pub fn n_regions(self) -> usize {
        match self {
            ShapeKind::Sphere | ShapeKind::Torus | ShapeKind::PlanePair => 2,
            ShapeKind::Cube => 6,
            ShapeKind::Cylinder => 3,
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "torus" => Ok(ShapeKind::Torus),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "plane-pair" => Ok(ShapeKind::PlanePair),
            other => Err(Error::Parameter(format!("unknown shape kind `{other}`"))),
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::PlanePair => "plane-pair",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
}

pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.3;
pub const CYLINDER_RADIUS: f64 = 0.6;
pub const PLANE_OFFSET: f64 = 0.5;

/// Surface samples of a unit-scale shape with analytic region labels.
///
/// Regions: sphere upper (1) / lower (0) hemisphere; cube face `2 * axis + (coord < 0)`;
/// torus outer (0) / inner (1) half of the tube; cylinder lateral (0), top (1),
/// bottom (2); plane pair upper (0) / lower (1).
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < 8 {
        return Err(Error::Parameter(format!("need at least 8 points, got {}", spec.n_points)));
    }
    if !(spec.jitter_sigma >= 0.0 && spec.jitter_sigma.is_finite()) {
        return Err(Error::Parameter(format!("jitter sigma {} must be >= 0", spec.jitter_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut coords = Vec::with_capacity(spec.n_points * 3);
    let mut labels = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let (p, l) = surface_point(spec.kind, &mut rng);
        coords.extend_from_slice(&p);
        labels.push(l);
    }
    if spec.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.jitter_sigma).expect("validated sigma");
        for c in &mut coords {
            *c += normal.sample(&mut rng);
        }
    }
    PointCloud::new(Tensor::new(&[spec.n_points, 3], coords)?, None, Some(labels))
}

fn surface_point(kind: ShapeKind, rng: &mut impl Rng) -> ([f64; 3], usize) {
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                let p = [v[0] / n, v[1] / n, v[2] / n];
                return (p, usize::from(p[2] >= 0.0));
            }
        },
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let (axis, neg) = (face / 2, face % 2 == 1);
            let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0];
            p.swap(axis, 2);
            p[axis] = if neg { -1.0 } else { 1.0 };
            (p, face)
        }
        ShapeKind::Torus => {
            // Area element is proportional to R + r cos(theta).
            let theta = loop {
                let t = rng.random_range(0.0..2.0 * PI);
                let u: f64 = rng.random_range(0.0..TORUS_MAJOR + TORUS_MINOR);
                if u <= TORUS_MAJOR + TORUS_MINOR * t.cos() {
                    break t;
                }
            };
            let phi = rng.random_range(0.0..2.0 * PI);
            let w = TORUS_MAJOR + TORUS_MINOR * theta.cos();
            ([w * phi.cos(), w * phi.sin(), TORUS_MINOR * theta.sin()], usize::from(theta.cos() < 0.0))
        }
        ShapeKind::Cylinder => {
            let lateral = 2.0 * PI * CYLINDER_RADIUS * 2.0;
            let cap = PI * CYLINDER_RADIUS * CYLINDER_RADIUS;
            let u = rng.random_range(0.0..lateral + 2.0 * cap);
            if u < lateral {
                let phi = rng.random_range(0.0..2.0 * PI);
                let z = rng.random_range(-1.0..1.0);
                ([CYLINDER_RADIUS * phi.cos(), CYLINDER_RADIUS * phi.sin(), z], 0)
            } else {
                let r = CYLINDER_RADIUS * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..2.0 * PI);
                let top = u < lateral + cap;
                ([r * phi.cos(), r * phi.sin(), if top { 1.0 } else { -1.0 }], if top { 1 } else { 2 })
            }
        }
        ShapeKind::PlanePair => {
            let top = rng.random_bool(0.5);
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                if top { PLANE_OFFSET } else { -PLANE_OFFSET },
            ];
            (p, usize::from(!top))
        }
    }
}

/// One labeled example: the class id, with per-point labels (if any) in the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub cloud: PointCloud,
    pub label: usize,
}

/// Training augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: [f64; 3],
    pub translation: [f64; 3],
    pub drop_ratio: f64,
}

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const TRANSLATION_RANGE: f64 = 0.1;
pub const MAX_DROP_RATIO: f64 = 0.2;

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { scale: [1.0; 3], translation: [0.0; 3], drop_ratio: 0.0 };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            scale: std::array::from_fn(|_| rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1)),
            translation: std::array::from_fn(|_| rng.random_range(-TRANSLATION_RANGE..=TRANSLATION_RANGE)),
            drop_ratio: rng.random_range(0.0..=MAX_DROP_RATIO),
        }
    }
}

/// Applies scaling and translation, then overwrites `round(drop_ratio * N)` random
/// points (features and labels included) with the first point.
pub fn augment_with(pc: &PointCloud, p: &AugmentParams, rng: &mut impl Rng) -> PointCloud {
    let mut out = pc.clone();
    for row in out.coords.data_mut().chunks_mut(3) {
        for a in 0..3 {
            row[a] = row[a] * p.scale[a] + p.translation[a];
        }
    }
    let n = out.len();
    let n_drop = ((p.drop_ratio * n as f64).round() as usize).min(n);
    if n_drop > 0 {
        let first_coords = out.coords.row(0).to_vec();
        let first_feats = out.feats.as_ref().map(|f| f.row(0).to_vec());
        let first_label = out.labels.as_ref().map(|l| l[0]);
        for i in sample(rng, n, n_drop) {
            out.coords.row_mut(i).copy_from_slice(&first_coords);
            if let (Some(f), Some(v)) = (out.feats.as_mut(), &first_feats) {
                f.row_mut(i).copy_from_slice(v);
            }
            if let (Some(l), Some(v)) = (out.labels.as_mut(), first_label) {
                l[i] = v;
            }
        }
    }
    out
}

/// Random training augmentation of a sample.
pub fn augment(s: &Sample, rng: &mut impl Rng) -> Sample {
    let p = AugmentParams::draw(rng);
    Sample { cloud: augment_with(&s.cloud, &p, rng), label: s.label }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub replace_ratio: f64,
    pub noise_low: f64,
    pub noise_high: f64,
    pub sparsify_to: Option<usize>,
}

impl CorruptionSpec {
    pub fn noise(replace_ratio: f64) -> Self {
        Self { replace_ratio, noise_low: -1.0, noise_high: 1.0, sparsify_to: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replace_ratio) {
            return Err(Error::Parameter(format!("replace ratio {} not in [0,1]", self.replace_ratio)));
        }
        if !(self.noise_low < self.noise_high) {
            return Err(Error::Parameter(format!(
                "noise range [{}, {}] is empty",
                self.noise_low, self.noise_high
            )));
        }
        Ok(())
    }
}

/// How features of replaced points are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFill {
    /// First three feature channels take the new coordinates, the rest are zeroed.
    Coords,
    Zero,
}

/// Replaces exactly `round(ratio * N)` distinct random points with uniform noise.
/// Replaced points keep their labels.
pub fn inject_noise(pc: &PointCloud, spec: &CorruptionSpec, fill: FeatureFill, rng: &mut impl Rng) -> Result<PointCloud> {
    spec.validate()?;
    let mut out = pc.clone();
    let n = out.len();
    let count = ((spec.replace_ratio * n as f64).round() as usize).min(n);
    let mut idx = sample(rng, n, count).into_vec();
    idx.sort_unstable();
    for i in idx {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.noise_low..spec.noise_high));
        out.coords.row_mut(i).copy_from_slice(&p);
        if let Some(f) = out.feats.as_mut() {
            let row = f.row_mut(i);
            row.iter_mut().for_each(|x| *x = 0.0);
            if fill == FeatureFill::Coords {
                for (x, v) in row.iter_mut().zip(p) {
                    *x = v;
                }
            }
        }
    }
    if let Some(m) = spec.sparsify_to {
        out = sparsify(&out, m, rng)?;
    }
    Ok(out)
}

/// Uniform random subset of `n` points without replacement.
pub fn sparsify(pc: &PointCloud, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n == 0 || n > pc.len() {
        return Err(Error::Parameter(format!("cannot keep {n} of {} points", pc.len())));
    }
    pc.select(&sample(rng, pc.len(), n).into_vec())
}

/// Mixes a base seed with an index into an independent seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Toy dataset parameters shared by both tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub kinds: Vec<ShapeKind>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { kinds: ShapeKind::ALL.to_vec(), n_train: 500, n_test: 200, n_points: 256, jitter_sigma: 0.01, seed: 0 }
    }
}

/// Balanced classification set: example `i` is shape `kinds[i % C]` with class `i % C`.
pub fn classification_set(cfg: &ToyConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let make = |count: usize, offset: u64| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| {
                let c = i % cfg.kinds.len();
                let spec = ShapeSpec {
                    kind: cfg.kinds[c],
                    n_points: cfg.n_points,
                    jitter_sigma: cfg.jitter_sigma,
                    seed: derive_seed(cfg.seed, offset + i as u64),
                };
                let mut cloud = gen_shape(&spec)?;
                cloud.labels = None;
                Ok(Sample { cloud, label: c })
            })
            .collect()
    };
    if cfg.kinds.is_empty() {
        return Err(Error::Parameter("no shape kinds".into()));
    }
    Ok((make(cfg.n_train, 0)?, make(cfg.n_test, 1 << 32)?))
}

/// Region-labeling set on the first kind of `cfg.kinds` (by default a sphere split
/// into hemispheres).
pub fn segmentation_set(cfg: &ToyConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let kind = *cfg.kinds.first().ok_or_else(|| Error::Parameter("no shape kinds".into()))?;
    let make = |count: usize, offset: u64| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| {
                let spec = ShapeSpec {
                    kind,
                    n_points: cfg.n_points,
                    jitter_sigma: cfg.jitter_sigma,
                    seed: derive_seed(cfg.seed, offset + i as u64),
                };
                Ok(Sample { cloud: gen_shape(&spec)?, label: kind.class_id() })
            })
            .collect()
    };
    Ok((make(cfg.n_train, 0)?, make(cfg.n_test, 1 << 32)?))
}

/// Writes `N D has_labels`, then one `x y z f1..fD [label]` line per point.
pub fn format_cloud(pc: &PointCloud) -> String {
    use std::fmt::Write;
    let d = pc.feats.as_ref().map_or(0, |f| f.cols());
    let mut s = format!("{} {} {}\n", pc.len(), d, u8::from(pc.labels.is_some()));
    for i in 0..pc.len() {
        let mut vals: Vec<String> = pc.coords.row(i).iter().map(f64::to_string).collect();
        if let Some(f) = &pc.feats {
            vals.extend(f.row(i).iter().map(f64::to_string));
        }
        if let Some(l) = &pc.labels {
            vals.push(l[i].to_string());
        }
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    s
}

pub fn parse_cloud(text: &str) -> Result<PointCloud> {
    let perr = |line: usize, msg: String| Error::Parse { line, msg };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file, expected header `N D has_labels`".into()))?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let parse_usize = |s: &str, what: &str| s.parse::<usize>().map_err(|_| perr(1, format!("bad {what} `{s}`")));
    if h.len() != 3 {
        return Err(perr(1, format!("header has {} fields, expected `N D has_labels`", h.len())));
    }
    let (n, d) = (parse_usize(h[0], "point count")?, parse_usize(h[1], "feature width")?);
    let has_labels = match h[2] {
        "0" => false,
        "1" => true,
        other => return Err(perr(1, format!("has_labels must be 0 or 1, got `{other}`"))),
    };
    let width = 3 + d + usize::from(has_labels);
    let (mut coords, mut feats, mut labels) = (Vec::with_capacity(n * 3), Vec::with_capacity(n * d), Vec::new());
    let mut count = 0;
    for (i, line) in lines {
        let ln = i + 1;
        if count == n {
            return Err(perr(ln, format!("header declares {n} points but the body has more")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(perr(ln, format!("expected {width} fields, got {}", fields.len())));
        }
        for (j, f) in fields[..3 + d].iter().enumerate() {
            let v = f.parse::<f64>().map_err(|_| perr(ln, format!("bad number `{f}`")))?;
            if j < 3 { coords.push(v) } else { feats.push(v) }
        }
        if has_labels {
            let f = fields[3 + d];
            labels.push(f.parse::<usize>().map_err(|_| perr(ln, format!("bad label `{f}`")))?);
        }
        count += 1;
    }
    if count != n {
        return Err(perr(text.lines().count().max(1), format!("header declares {n} points but the body has {count}")));
    }
    if n == 0 {
        return Err(perr(1, "cloud has no points".into()));
    }
    PointCloud::new(
        Tensor::new(&[n, 3], coords)?,
        (d > 0).then(|| Tensor::new(&[n, d], feats)).transpose()?,
        has_labels.then_some(labels),
    )
}

pub fn write_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, format_cloud(pc)).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    parse_cloud(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One manifest line: `split path [class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: PathBuf,
    pub label: Option<usize>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let split = match fields[0] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(perr(format!("unknown split `{other}`"))),
        };
        let path = fields.get(1).ok_or_else(|| perr("missing path".into()))?;
        let label = fields
            .get(2)
            .map(|l| l.parse::<usize>().map_err(|_| perr(format!("bad class `{l}`"))))
            .transpose()?;
        if fields.len() > 3 {
            return Err(perr("expected `split path [class]`".into()));
        }
        out.push(ManifestEntry { split, path: base.join(path), label });
    }
    Ok(out)
}

/// Loads the train and test samples listed in a manifest; paths are relative to it.
pub fn load_manifest(path: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in parse_manifest(&text, base)? {
        let s = Sample { cloud: read_cloud(&e.path)?, label: e.label.unwrap_or(0) };
        match e.split {
            Split::Train => train.push(s),
            Split::Test => test.push(s),
        }
    }
    Ok((train, test))
}
