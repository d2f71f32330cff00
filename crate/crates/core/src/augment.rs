//! Training-set synthesis: random de-alignment around the ground truth and
//! affine co-deformation of aligned pairs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{action_set, q_targets, Dimensionality, EnvState, MdpConfig};
use crate::error::{Result, VregError};
use crate::geometry::{random_affine, AffineTransform, ParamVector, RigidTransform};
use crate::policy::{Provenance, TrainingSample};
use crate::volume::{
    decode_volume, difference_image, downsample, encode_volume, generate_phantom, Phantom,
    PhantomSpec, Volume,
};

/// Symmetric per-parameter bounds (mm / degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbRange(pub [f64; 6]);

impl PerturbRange {
    /// ±30 mm in-plane, ±150 mm along z, ±30°.
    pub const COARSE_LONG_Z: PerturbRange = PerturbRange([30.0, 30.0, 150.0, 30.0, 30.0, 30.0]);
    /// ±30 mm, ±30°.
    pub const COARSE: PerturbRange = PerturbRange([30.0; 6]);
    /// ±5 mm, ±5°.
    pub const FINE: PerturbRange = PerturbRange([5.0; 6]);
    pub const ZERO: PerturbRange = PerturbRange([0.0; 6]);

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(VregError::Config(format!(
                "bad perturbation range {:?}",
                self.0
            )));
        }
        Ok(())
    }

    pub fn contains(&self, v: &ParamVector) -> bool {
        (0..6).all(|i| v[i].abs() <= self.0[i])
    }
}

/// An aligned image pair with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub reference: Volume,
    pub floating: Volume,
    pub ground_truth: RigidTransform,
    pub landmarks: Vec<Point3<f64>>,
}

impl From<Phantom> for AlignedPair {
    fn from(p: Phantom) -> Self {
        AlignedPair {
            reference: p.reference,
            floating: p.floating,
            ground_truth: p.ground_truth,
            landmarks: p.landmarks,
        }
    }
}

impl AlignedPair {
    pub fn downsampled(&self, factor: usize) -> AlignedPair {
        if factor <= 1 {
            return self.clone();
        }
        AlignedPair {
            reference: downsample(&self.reference, factor),
            floating: downsample(&self.floating, factor),
            ground_truth: self.ground_truth,
            landmarks: self.landmarks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DealignConfig {
    pub range: PerturbRange,
    pub fine: PerturbRange,
    pub near_truth_fraction: f64,
    pub dim: Dimensionality,
    pub mdp: MdpConfig,
}

impl DealignConfig {
    pub fn new(range: PerturbRange, dim: Dimensionality) -> Self {
        DealignConfig {
            range,
            fine: PerturbRange::FINE,
            near_truth_fraction: 0.5,
            dim,
            mdp: MdpConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.range.validate()?;
        self.fine.validate()?;
        self.mdp.validate()?;
        if !(0.0..=1.0).contains(&self.near_truth_fraction) {
            return Err(VregError::Config(format!(
                "near_truth_fraction {} not in [0,1]",
                self.near_truth_fraction
            )));
        }
        Ok(())
    }
}

/// Independent stream seed for sample `index` of `seed`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    // SplitMix64 finaliser over the combined key.
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Integer residual from the full range with probability `1 − f`, from the
/// fine box (clipped to the full range) with probability `f`.
pub fn sample_residual<R: Rng + ?Sized>(cfg: &DealignConfig, rng: &mut R) -> ParamVector {
    let near = rng.random::<f64>() < cfg.near_truth_fraction;
    let mut v = ParamVector::ZERO;
    for axis in cfg.dim.axes() {
        let i = axis.index();
        let b = if near {
            cfg.fine.0[i].min(cfg.range.0[i])
        } else {
            cfg.range.0[i]
        };
        let b = b.floor() as i64;
        v[i] = rng.random_range(-b..=b) as f64;
    }
    v
}

/// De-aligned sample `index`: the observation at residual `v` and the
/// analytic Q target for every action.
pub fn make_sample(
    pair: &AlignedPair,
    cfg: &DealignConfig,
    seed: u64,
    phantom: usize,
    index: u64,
) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let v = sample_residual(cfg, &mut rng);
    let state = EnvState::ideal(v, pair.ground_truth);
    let observation = difference_image(&pair.reference, &pair.floating, state.current())?;
    let targets = q_targets(&v, &action_set(cfg.dim), &cfg.mdp)?;
    Ok(TrainingSample {
        observation,
        targets,
        residual: v,
        provenance: Provenance {
            phantom,
            seed,
            index,
        },
    })
}

/// Endless seeded stream of de-aligned samples.
pub fn random_dealign<'a>(
    pair: &'a AlignedPair,
    cfg: &'a DealignConfig,
    seed: u64,
    phantom: usize,
) -> impl Iterator<Item = Result<TrainingSample>> + 'a {
    (0u64..).map(move |i| make_sample(pair, cfg, seed, phantom, i))
}

fn resample_affine(vol: &Volume, a: &AffineTransform) -> Volume {
    let inv = a.inverse();
    let grid = *vol.grid();
    Volume::from_fn(grid, |p| vol.sample(&inv.apply(&p)).unwrap_or(0.0))
}

/// Deforms both images of a pair by `a` (pull-back on their own grids)
/// and maps the landmarks forward. The rigid alignment between the two
/// images is untouched since both move identically.
pub fn co_deform(pair: &AlignedPair, a: &AffineTransform) -> Result<AlignedPair> {
    if a.determinant().abs() <= 1e-6 {
        return Err(VregError::Degenerate { attempts: 0 });
    }
    Ok(AlignedPair {
        reference: resample_affine(&pair.reference, a),
        floating: resample_affine(&pair.floating, a),
        ground_truth: pair.ground_truth,
        landmarks: pair.landmarks.iter().map(|p| a.apply(p)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomEntry {
    pub spec: PhantomSpec,
    pub seed: u64,
    /// Shear range of the random co-deformation; 0 disables it.
    #[serde(default)]
    pub shear: f64,
}

impl PhantomEntry {
    pub fn build(&self) -> Result<AlignedPair> {
        let pair: AlignedPair = generate_phantom(&self.spec, self.seed)?.into();
        if self.shear > 0.0 {
            co_deform(&pair, &random_affine(self.shear, self.seed)?)
        } else {
            Ok(pair)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ranges {
    pub coarse: PerturbRange,
    pub fine: PerturbRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub phantoms: Vec<PhantomEntry>,
    pub ranges: Ranges,
    #[serde(default = "default_fraction")]
    pub near_truth_fraction: f64,
    /// Samples per phantom.
    pub counts: usize,
    pub seed: u64,
    pub dimensionality: Dimensionality,
    #[serde(default)]
    pub mdp: MdpConfig,
    /// Box-average factor applied to both images before sampling.
    #[serde(default = "default_factor")]
    pub downsample: usize,
}

fn default_fraction() -> f64 {
    0.5
}

fn default_factor() -> usize {
    1
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phantoms.is_empty() {
            return Err(VregError::Config("no phantoms listed".into()));
        }
        if self.counts == 0 || self.downsample == 0 {
            return Err(VregError::Config(
                "counts and downsample must be at least 1".into(),
            ));
        }
        self.dealign().validate()
    }

    pub fn dealign(&self) -> DealignConfig {
        DealignConfig {
            range: self.ranges.coarse,
            fine: self.ranges.fine,
            near_truth_fraction: self.near_truth_fraction,
            dim: self.dimensionality,
            mdp: self.mdp.clone(),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.phantoms.len() * self.counts
    }

    /// Per-phantom sample stream seed.
    pub fn phantom_seed(&self, phantom: usize) -> u64 {
        sample_seed(self.seed, u64::MAX - phantom as u64)
    }

    /// Twenty 3-D spine-like phantoms with 2000 samples each.
    pub fn desk_default() -> Self {
        DatasetConfig {
            phantoms: (0..20)
                .map(|i| PhantomEntry {
                    spec: PhantomSpec::new(
                        crate::volume::PhantomKind::SpineLike,
                        [32, 32, 64],
                        [2.0, 2.0, 2.0],
                    ),
                    seed: i,
                    shear: 0.1,
                })
                .collect(),
            ranges: Ranges {
                coarse: PerturbRange::COARSE_LONG_Z,
                fine: PerturbRange::FINE,
            },
            near_truth_fraction: 0.5,
            counts: 2000,
            seed: 0,
            dimensionality: Dimensionality::Three,
            mdp: MdpConfig::default(),
            downsample: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub file: String,
    pub phantom: usize,
    pub index: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub samples: Vec<SampleRecord>,
    pub targets: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const TARGETS_FILE: &str = "targets.csv";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| VregError::io(path, e))
}

/// Writes sample volumes, `targets.csv` and `manifest.json` under `out`.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let sample_dir = out.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| VregError::io(&sample_dir, e))?;
    let dealign = cfg.dealign();
    let arity = action_set(cfg.dimensionality).len();
    let mut csv = String::from("file,phantom,index,v1,v2,v3,v4,v5,v6");
    for i in 1..=arity {
        csv.push_str(&format!(",q{i}"));
    }
    csv.push('\n');
    let mut records = Vec::new();
    for (pi, entry) in cfg.phantoms.iter().enumerate() {
        let pair = entry.build()?.downsampled(cfg.downsample);
        let seed = cfg.phantom_seed(pi);
        for (i, sample) in random_dealign(&pair, &dealign, seed, pi)
            .take(cfg.counts)
            .enumerate()
        {
            let sample = sample?;
            let name = format!("samples/p{pi:03}_{i:06}.vreg");
            let bytes = encode_volume(&sample.observation);
            write(&out.join(&name), &bytes)?;
            csv.push_str(&format!("{name},{pi},{i}"));
            for x in sample.residual.0 {
                csv.push_str(&format!(",{x}"));
            }
            for q in &sample.targets {
                csv.push_str(&format!(",{q}"));
            }
            csv.push('\n');
            records.push(SampleRecord {
                file: name,
                phantom: pi,
                index: i as u64,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    write(&out.join(TARGETS_FILE), csv.as_bytes())?;
    let manifest = Manifest {
        config: cfg.clone(),
        samples: records,
        targets: sha256_hex(csv.as_bytes()),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| VregError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| VregError::format(path, e.to_string()))
}

/// Loads every sample listed in a manifest, verifying checksums.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Vec<TrainingSample>)> {
    let manifest = read_manifest(manifest_path)?;
    let root: PathBuf = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let targets_path = root.join(TARGETS_FILE);
    let text = fs::read_to_string(&targets_path).map_err(|e| VregError::io(&targets_path, e))?;
    let arity = action_set(manifest.config.dimensionality).len();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (line_no, (line, rec)) in text.lines().skip(1).zip(&manifest.samples).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 + arity || cols[0] != rec.file {
            return Err(VregError::format(
                &targets_path,
                format!("row {} does not match the manifest", line_no + 2),
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| VregError::format(&targets_path, format!("row {}: {e}", line_no + 2)))
        };
        let mut v = ParamVector::ZERO;
        for i in 0..6 {
            v[i] = num(cols[3 + i])?;
        }
        let targets = cols[9..]
            .iter()
            .map(|s| num(s))
            .collect::<Result<Vec<_>>>()?;
        let path = root.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| VregError::io(&path, e))?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(VregError::format(&path, "checksum mismatch"));
        }
        samples.push(TrainingSample {
            observation: decode_volume(&bytes, &path)?,
            targets,
            residual: v,
            provenance: Provenance {
                phantom: rec.phantom,
                seed: manifest.config.phantom_seed(rec.phantom),
                index: rec.index,
            },
        });
    }
    if samples.len() != manifest.samples.len() {
        return Err(VregError::format(
            &targets_path,
            "fewer rows than manifest entries",
        ));
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{argmax, optimal_actions};
    use crate::volume::PhantomKind;

    fn pair2d() -> AlignedPair {
        let spec = PhantomSpec::new(PhantomKind::Simple, [24, 24, 1], [2.0, 2.0, 1.0]);
        generate_phantom(&spec, 1).unwrap().into()
    }

    #[test]
    fn zero_range_samples_sit_at_ground_truth() {
        let pair = pair2d();
        let mut cfg = DealignConfig::new(PerturbRange::ZERO, Dimensionality::Two);
        cfg.fine = PerturbRange::ZERO;
        for s in random_dealign(&pair, &cfg, 3, 0).take(10) {
            let s = s.unwrap();
            assert_eq!(s.residual, ParamVector::ZERO);
            // Every action from the origin lands at D = 1: r = −1, Q = r + γ·11.
            for q in &s.targets {
                assert!((q - (-1.0 + 0.9 * 11.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarse_draws_respect_bounds_and_spread() {
        let mut cfg = DealignConfig::new(PerturbRange::COARSE_LONG_Z, Dimensionality::Three);
        cfg.near_truth_fraction = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<ParamVector> = (0..10_000)
            .map(|_| sample_residual(&cfg, &mut rng))
            .collect();
        assert!(draws.iter().all(|v| cfg.range.contains(v)));
        let sd = |i: usize| {
            let m = draws.iter().map(|v| v[i]).sum::<f64>() / draws.len() as f64;
            (draws.iter().map(|v| (v[i] - m).powi(2)).sum::<f64>() / draws.len() as f64).sqrt()
        };
        let ratio = sd(2) / sd(0);
        assert!((ratio - 5.0).abs() < 0.3, "{ratio}");
    }

    #[test]
    fn full_fraction_stays_in_fine_box() {
        let mut cfg = DealignConfig::new(PerturbRange::COARSE, Dimensionality::Three);
        cfg.near_truth_fraction = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5000 {
            assert!(PerturbRange::FINE.contains(&sample_residual(&cfg, &mut rng)));
        }
    }

    #[test]
    fn fine_box_is_denser_by_the_mixture_factor() {
        let cfg = DealignConfig::new(
            PerturbRange([20.0, 20.0, 0.0, 0.0, 0.0, 20.0]),
            Dimensionality::Two,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let inside = (0..n)
            .filter(|_| PerturbRange::FINE.contains(&sample_residual(&cfg, &mut rng)))
            .count() as f64;
        let (v_in, v_all) = (11f64.powi(3), 41f64.powi(3));
        let measured = (inside / v_in) / ((n as f64 - inside) / (v_all - v_in));
        let f = cfg.near_truth_fraction;
        let expected = 1.0 + f * v_all / ((1.0 - f) * v_in);
        assert!(measured >= 0.9 * expected, "{measured} vs {expected}");
    }

    #[test]
    fn targets_favour_the_optimal_action() {
        let pair = pair2d();
        let cfg = DealignConfig::new(
            PerturbRange([10.0, 10.0, 0.0, 0.0, 0.0, 10.0]),
            Dimensionality::Two,
        );
        let acts = action_set(cfg.dim);
        for s in random_dealign(&pair, &cfg, 9, 0).take(50) {
            let s = s.unwrap();
            let state = EnvState::ideal(s.residual, RigidTransform::identity());
            let best = optimal_actions(&state, &acts, &cfg.mdp).unwrap();
            assert!(best.contains(&acts[argmax(&s.targets)]));
        }
    }

    #[test]
    fn streams_are_deterministic() {
        let pair = pair2d();
        let cfg = DealignConfig::new(
            PerturbRange([10.0, 10.0, 0.0, 0.0, 0.0, 10.0]),
            Dimensionality::Two,
        );
        let a: Vec<_> = random_dealign(&pair, &cfg, 5, 0)
            .take(5)
            .map(|s| s.unwrap())
            .collect();
        let b: Vec<_> = random_dealign(&pair, &cfg, 5, 0)
            .take(5)
            .map(|s| s.unwrap())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_co_deformation_is_a_no_op() {
        let pair = pair2d();
        let out = co_deform(&pair, &AffineTransform::identity()).unwrap();
        assert_eq!(out, pair);
    }

    #[test]
    fn co_deformed_pair_stays_aligned() {
        let spec = PhantomSpec::new(PhantomKind::Simple, [24, 24, 1], [2.0, 2.0, 1.0]);
        let pair: AlignedPair = generate_phantom(&spec, 2).unwrap().into();
        let out = co_deform(&pair, &random_affine(0.25, 4).unwrap()).unwrap();
        let d = difference_image(&out.reference, &out.floating, &out.ground_truth).unwrap();
        assert_eq!(d.l2_norm(), 0.0);
        let oracle = crate::policy::OraclePolicy::new(
            out.ground_truth,
            Dimensionality::Two,
            MdpConfig::default(),
        );
        let t0 =
            crate::geometry::transform_from_params(&ParamVector([4.0, -3.0, 0.0, 0.0, 0.0, 6.0]));
        let mut opts = crate::policy::GreedyOptions::new(40, Dimensionality::Two);
        opts.ground_truth = Some(out.ground_truth);
        let (_, traj) =
            crate::policy::greedy_register(&out.reference, &out.floating, &t0, &oracle, &opts)
                .unwrap();
        let ds: Vec<f64> = traj.iter().map(|s| s.residual.unwrap().norm()).collect();
        assert!(ds.windows(2).all(|w| w[1] < w[0]), "{ds:?}");
    }

    #[test]
    fn singular_deformation_is_rejected() {
        let mut m = nalgebra::Matrix3::identity();
        m[(1, 1)] = 0.0;
        assert!(AffineTransform::from_linear(m).is_err());
    }

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            phantoms: vec![PhantomEntry {
                spec: PhantomSpec::new(PhantomKind::Simple, [16, 16, 1], [2.0, 2.0, 1.0]),
                seed: 3,
                shear: 0.0,
            }],
            ranges: Ranges {
                coarse: PerturbRange([6.0, 6.0, 0.0, 0.0, 0.0, 6.0]),
                fine: PerturbRange::FINE,
            },
            near_truth_fraction: 0.5,
            counts: 1,
            seed: 7,
            dimensionality: Dimensionality::Two,
            mdp: MdpConfig::default(),
            downsample: 1,
        }
    }

    #[test]
    fn single_count_writes_one_sample() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&tiny_config(), dir.path()).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(fs::read_dir(dir.path().join("samples")).unwrap().count(), 1);
    }

    #[test]
    fn dataset_is_reproducible_and_loadable() {
        let mut cfg = tiny_config();
        cfg.counts = 4;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = build_dataset(&cfg, a.path()).unwrap();
        let reread = read_manifest(&a.path().join(MANIFEST_FILE)).unwrap();
        let mb = build_dataset(&reread.config, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let (_, samples) = load_dataset(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(samples.len(), 4);
        let pair = cfg.phantoms[0].build().unwrap();
        let direct = make_sample(&pair, &cfg.dealign(), cfg.phantom_seed(0), 0, 2).unwrap();
        assert_eq!(samples[2].targets, direct.targets);
        assert_eq!(samples[2].residual, direct.residual);
    }

    #[test]
    fn desk_default_counts() {
        assert_eq!(DatasetConfig::desk_default().total_samples(), 40_000);
    }
}
