//! Implementations of the `tokmerge` subcommands. Each command writes its
//! human-readable report to `out` and its artifacts to disk.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrate::calibrate_layer;
use crate::calibrate::{
    calibrate, load_profile, save_profile, Calibration, CalibrationOptions, MergeSchedule,
};
use crate::dtome::size_weighted_attention;
use crate::error::{Error, Result};
use crate::matrix::TokenMatrix;
use crate::merge_map::{MergeMap, SizeVector};
use crate::nn::{AttentionWeights, Init};
use crate::oracle;
use crate::rope::{AttentionMask, RopeAngles, RopeConfig};
use crate::stats::{mean, spearman, std_dev};
use crate::synth::{complexity_score, load_corpus, write_corpus, Manifest, SynthSpec};
use crate::vit::{format_sig6, GrayImage, MergeMode, ToyVit, ViTConfig};
use crate::vtu::{
    flops_model, vtu_attention, vtu_head_attention, vtu_similarity, FlopsReport, UniqueSequence,
};

/// Exit status of the binary for a given failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 3,
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Shape(_)
        | Error::SchemaViolation(_) => 2,
        Error::Calibration(_) | Error::Logic(_) => 1,
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ViTConfig> {
    let cfg = match path {
        None => ViTConfig::default(),
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// FNV-1a of the manifest bytes, used as a stable corpus identifier.
fn corpus_fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("manifest-{h:016x}")
}

/// Corpus images in manifest order: ids, raw bytes and encoder inputs.
struct LoadedImages {
    ids: Vec<String>,
    raw: Vec<Vec<u8>>,
    gray: Vec<GrayImage>,
}

fn corpus_images(manifest: &Path, cfg: &ViTConfig) -> Result<LoadedImages> {
    let corpus = load_corpus(manifest)?;
    let mut ids = Vec::with_capacity(corpus.entries.len());
    let mut raw = Vec::with_capacity(corpus.entries.len());
    let mut gray = Vec::with_capacity(corpus.entries.len());
    for (e, img) in corpus.entries.iter().zip(corpus.images) {
        if (img.h, img.w) != (cfg.image_h, cfg.image_w) {
            return Err(Error::Config(format!(
                "{} is {}x{}, encoder expects {}x{}",
                e.path, img.h, img.w, cfg.image_h, cfg.image_w
            )));
        }
        ids.push(e.path.trim_end_matches(".raw").to_string());
        gray.push(img.to_gray()?);
        raw.push(img.bytes);
    }
    Ok(LoadedImages { ids, raw, gray })
}

pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path, out: &mut impl Write) -> Result<Manifest> {
    let manifest = write_corpus(spec, out_dir)?;
    writeln!(
        out,
        "wrote {} images ({}x{}) and manifest.json to {}",
        manifest.images.len(),
        spec.h,
        spec.w,
        out_dir.display()
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct CalibrateArgs<'a> {
    pub manifest: &'a Path,
    pub config: ViTConfig,
    pub schedule: MergeSchedule,
    pub batch_size: usize,
    pub num_batches: usize,
    pub seed: u64,
    pub out_profile: &'a Path,
    pub corpus_id: Option<String>,
}

pub fn cmd_calibrate(args: &CalibrateArgs<'_>, out: &mut impl Write) -> Result<Calibration> {
    let cfg = args.config.clone().with_merge(MergeMode::Off);
    let images = corpus_images(args.manifest, &cfg)?.gray;
    let corpus_id = match &args.corpus_id {
        Some(id) => id.clone(),
        None => corpus_fingerprint(&std::fs::read(args.manifest)?),
    };
    let encoder = ToyVit::seeded(cfg)?;
    let cal = calibrate(
        &encoder,
        &images,
        &CalibrationOptions {
            schedule: args.schedule,
            batch_size: args.batch_size,
            num_batches: args.num_batches,
            seed: args.seed,
            corpus_id,
        },
    )?;
    save_profile(&cal.profile, args.out_profile)?;
    writeln!(out, "layer,r_i,tau,mean_merged_per_image")?;
    for (l, ((tau, r), merged)) in cal
        .profile
        .taus
        .iter()
        .zip(&cal.targets)
        .zip(cal.mean_merged_per_layer())
        .enumerate()
    {
        writeln!(out, "{l},{r},{},{}", format_sig6(*tau), format_sig6(merged))?;
    }
    let n = encoder.cfg.num_tokens();
    let expected = n as f64 - cal.targets.iter().sum::<usize>() as f64;
    let mean_tokens = mean(
        &cal.batches
            .iter()
            .map(|b| b.mean_tokens())
            .collect::<Vec<_>>(),
    );
    writeln!(
        out,
        "calibration tokens: mean {} (expected {}), profile written to {}",
        format_sig6(mean_tokens),
        format_sig6(expected),
        args.out_profile.display()
    )?;
    Ok(cal)
}

#[derive(Debug, Clone)]
pub enum EncodeMode {
    Off,
    TopR(usize),
    Profile(std::path::PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeRow {
    pub image_id: String,
    pub complexity: f64,
    pub token_count: usize,
    pub layer_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeSummary {
    pub rows: Vec<EncodeRow>,
    pub mean_tokens: f64,
    pub std_tokens: f64,
    pub spearman: f64,
}

pub const ENCODE_CSV_HEADER: &str = "image_id,complexity_score,token_count,per_layer_counts";

impl EncodeSummary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ENCODE_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let layers: Vec<String> = r.layer_counts.iter().map(usize::to_string).collect();
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.image_id,
                format_sig6(r.complexity),
                r.token_count,
                layers.join(";")
            ));
        }
        s
    }
}

/// Encodes every image of a corpus and summarizes token counts.
pub fn encode_corpus(
    ids: &[String],
    raw: &[Vec<u8>],
    images: &[GrayImage],
    encoder: &ToyVit,
) -> Result<EncodeSummary> {
    let (h, w) = (encoder.cfg.image_h, encoder.cfg.image_w);
    let rows = images
        .par_iter()
        .zip(raw.par_iter())
        .zip(ids.par_iter())
        .map(|((img, bytes), id)| {
            let enc = encoder.encode(img)?;
            Ok(EncodeRow {
                image_id: id.clone(),
                complexity: complexity_score(bytes, h, w)?,
                token_count: enc.token_count(),
                layer_counts: enc.layer_counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<f64> = rows.iter().map(|r| r.token_count as f64).collect();
    let complexity: Vec<f64> = rows.iter().map(|r| r.complexity).collect();
    Ok(EncodeSummary {
        mean_tokens: mean(&counts),
        std_tokens: std_dev(&counts),
        spearman: if rows.len() >= 2 {
            spearman(&complexity, &counts)
        } else {
            f64::NAN
        },
        rows,
    })
}

pub fn cmd_encode(
    manifest: &Path,
    config: &ViTConfig,
    mode: &EncodeMode,
    out_csv: &Path,
    out: &mut impl Write,
) -> Result<EncodeSummary> {
    let merge = match mode {
        EncodeMode::Off => MergeMode::Off,
        EncodeMode::TopR(r) => MergeMode::FixedTopR(vec![*r; config.layers]),
        EncodeMode::Profile(p) => MergeMode::Dynamic(load_profile(p)?.taus),
    };
    let cfg = config.clone().with_merge(merge);
    let encoder = ToyVit::seeded(cfg)?;
    let c = corpus_images(manifest, &encoder.cfg)?;
    let summary = encode_corpus(&c.ids, &c.raw, &c.gray, &encoder)?;
    std::fs::write(out_csv, summary.to_csv())?;
    writeln!(
        out,
        "images {}, tokens {}±{} (of {}), spearman(complexity, tokens) {}",
        summary.rows.len(),
        format_sig6(summary.mean_tokens),
        format_sig6(summary.std_tokens),
        encoder.cfg.num_tokens(),
        format_sig6(summary.spearman)
    )?;
    Ok(summary)
}

/// Random partition of `0..n` into exactly `n_un` nonempty groups.
pub fn random_merge_map(n: usize, n_un: usize, rng: &mut impl Rng) -> Result<MergeMap> {
    if n_un == 0 || n_un > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} positions into {n_un} groups"
        )));
    }
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(rng);
    let mut labels = vec![0; n];
    for (i, &p) in positions.iter().enumerate() {
        labels[p] = if i < n_un {
            i
        } else {
            rng.random_range(0..n_un)
        };
    }
    MergeMap::from_labels(&labels)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<TokenMatrix> {
    TokenMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub seed: u64,
    /// Full sequence lengths to exercise.
    pub sizes: Vec<usize>,
    /// Test hook: perturbs the fast paths so every equivalence suite must fail.
    pub perturb: bool,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![1, 7, 32, 96],
            perturb: false,
        }
    }
}

fn suite(name: &'static str, tolerance: f64, errors: &[f64]) -> SuiteResult {
    let worst = errors.iter().copied().fold(0.0, f64::max);
    SuiteResult {
        name,
        cases: errors.len(),
        worst,
        tolerance,
        passed: !errors.is_empty() && errors.iter().all(|e| *e <= tolerance),
    }
}

/// Reference attention MFLOPs at N=576, 32 heads of width 128:
/// `(N_un, MFLOPs)`, with `N_un = N` for full attention.
pub const FLOPS_TABLE: [(usize, f64); 4] = [(576, 1359.0), (89, 64.9), (195, 311.5), (394, 1272.0)];

/// Randomized equivalence checks of every fast path against its oracle.
pub fn run_verify(args: &VerifyArgs) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let bump = if args.perturb { 1e-6 } else { 0.0 };

    let mut sim_err = Vec::new();
    let mut attn_err = Vec::new();
    for &n in &args.sizes {
        for head_dim in [2usize, 4, 16] {
            let n_un = rng.random_range(1..=n);
            let map = random_merge_map(n, n_un, &mut rng)?;
            let cfg = RopeConfig::new(head_dim, 10000.0)?;
            let angles = RopeAngles::sequential(&cfg, n);
            let q = random_matrix(&mut rng, n_un, head_dim)?;
            let k = random_matrix(&mut rng, n_un, head_dim)?;
            let fast = vtu_similarity(&q, &k, &map, &angles)?;
            let fast = fast.add(&TokenMatrix::from_fn(n, n, |_, _| bump)?)?;
            let slow = oracle::full_rope_similarity(&map.expand(&q)?, &map.expand(&k)?, &angles)?;
            sim_err.push(fast.relative_error(&slow)?);

            let heads = 2;
            let weights = AttentionWeights::seeded(heads, head_dim, &mut Init::new(rng.random()))?;
            let seq = UniqueSequence::new(random_matrix(&mut rng, n_un, heads * head_dim)?, map)?;
            for mask in [None, Some(AttentionMask::causal(n))] {
                let fast = vtu_attention(&seq, &weights, &angles, mask.as_ref())?.e_un;
                let fast = fast.add(&TokenMatrix::from_fn(fast.rows(), fast.cols(), |_, _| {
                    bump
                })?)?;
                let slow = oracle::reference_vtu(&seq, &weights, &angles, mask.as_ref())?;
                attn_err.push(fast.relative_error(&slow)?);
            }
        }
    }

    let mut swa_err = Vec::new();
    for _ in 0..20 {
        let n_un = rng.random_range(1..8);
        let d = rng.random_range(1..6);
        let sizes = SizeVector::new((0..n_un).map(|_| rng.random_range(1..=64)).collect())?;
        let q = random_matrix(&mut rng, 1, d)?;
        let k = random_matrix(&mut rng, n_un, d)?;
        let v = random_matrix(&mut rng, n_un, d)?;
        let scale = 1.0 / (d as f64).sqrt();
        let fast = size_weighted_attention(&q, &k, &v, &sizes, scale)?;
        let slow = oracle::duplicated_attention(q.row(0), &k, &v, &sizes, scale)?;
        let err = fast
            .row(0)
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a + bump - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        swa_err.push(err);
    }

    let mut thr_err = Vec::new();
    for _ in 0..50 {
        let len = rng.random_range(0..60);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        for k in 0..=len + 1 {
            let a = calibrate_layer(&scores, k);
            let b = oracle::reference_threshold(&scores, k);
            thr_err.push(if a == b { 0.0 } else { 1.0 });
        }
    }

    // Table values carry four significant figures.
    let mut flops_err = Vec::new();
    for (n_un, reference) in FLOPS_TABLE {
        let r = flops_model(576, n_un, 32, 128)?;
        let model = if n_un == 576 {
            r.full_mflops
        } else {
            r.vtu_mflops
        };
        flops_err.push((model - reference).abs() / reference);
    }

    Ok(VerifyReport {
        suites: vec![
            suite("vtu-similarity", 1e-10, &sim_err),
            suite("vtu-attention", 1e-8, &attn_err),
            suite("size-weighted-attention", 1e-10, &swa_err),
            suite("threshold-order-statistic", 0.0, &thr_err),
            suite("flops-table", 5e-4, &flops_err),
        ],
    })
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut impl Write) -> Result<VerifyReport> {
    let report = run_verify(args)?;
    for s in &report.suites {
        writeln!(
            out,
            "{} {}: {} cases, worst error {:.3e} (tolerance {:.1e})",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.cases,
            s.worst,
            s.tolerance
        )?;
    }
    for (n_un, reference) in FLOPS_TABLE {
        let r = flops_model(576, n_un, 32, 128)?;
        let model = if n_un == 576 {
            r.full_mflops
        } else {
            r.vtu_mflops
        };
        writeln!(
            out,
            "  flops N_un={n_un}: model {model:.1} MFLOPs, reference {reference:.1}"
        )?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub n: usize,
    pub n_un: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub flops: FlopsReport,
    pub full_ms: (f64, f64),
    pub vtu_ms: (f64, f64),
}

pub const BENCH_CSV_HEADER: &str =
    "n_full,n_unique,d_total,full_mflops,vtu_mflops,full_ms_mean,full_ms_std,vtu_ms_mean,vtu_ms_std";

fn time_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((mean(&samples), std_dev(&samples)))
}

/// Analytic MFLOPs plus measured wall-clock of the attention core (all
/// heads, projections excluded) for the full path and the unique-token path.
pub fn cmd_bench(args: &BenchArgs, out: &mut impl Write) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let angles = RopeAngles::sequential(&RopeConfig::new(args.head_dim, 10000.0)?, args.n);
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    let mut rows = Vec::new();
    for &n_un in &args.n_un {
        let flops = flops_model(args.n, n_un, args.heads, args.head_dim)?;
        let map = random_merge_map(args.n, n_un, &mut rng)?;
        let heads = (0..args.heads)
            .map(|_| {
                Ok((
                    random_matrix(&mut rng, n_un, args.head_dim)?,
                    random_matrix(&mut rng, n_un, args.head_dim)?,
                    random_matrix(&mut rng, n_un, args.head_dim)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let expanded = heads
            .iter()
            .map(|(q, k, v)| Ok((map.expand(q)?, map.expand(k)?, map.expand(v)?)))
            .collect::<Result<Vec<_>>>()?;
        let full_ms = time_ms(args.reps, || {
            for (q, k, v) in &expanded {
                oracle::full_rope_head_attention(q, k, v, &angles, None)?;
            }
            Ok(())
        })?;
        let vtu_ms = time_ms(args.reps, || {
            for (q, k, v) in &heads {
                vtu_head_attention(q, k, v, &map, &angles, None)?;
            }
            Ok(())
        })?;
        writeln!(
            out,
            "{},{},{},{},{}",
            flops.csv_line(),
            format_sig6(full_ms.0),
            format_sig6(full_ms.1),
            format_sig6(vtu_ms.0),
            format_sig6(vtu_ms.1)
        )?;
        rows.push(BenchRow {
            flops,
            full_ms,
            vtu_ms,
        });
    }
    Ok(rows)
}
