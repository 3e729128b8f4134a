//! Command-line surface. Machine-readable output goes to stdout, logs to
//! stderr. Exit status: 0 success, 1 input or usage error, 2 no consensus.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_cases, select_concepts_greedy, EvalCase};
use crate::io::{
    load_frame, load_model, parse_key_values, read_manifest, read_saliency, save_frame, save_model, write_manifest,
    write_saliency, FramePaths, FrameRef, PairManifestEntry,
};
use crate::metrics::{DatasetReport, ImageDimension, MetricConfig};
use crate::pipeline::{estimate_relative_pose, Diagnostics, PipelineConfig};
use crate::pose_solver::PoseEstimate;
use crate::synth::{
    canonical_pose, default_intrinsics, make_object, make_pair, random_relative_pose, reference_relative_pose,
    NoiseConfig, ObjectKind,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NO_CONSENSUS: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "conceptpose", version, about = "Relative object pose from two RGB-D frames and concept saliencies")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the anchor-to-query camera transform for one pair.
    Estimate {
        anchor_dir: PathBuf,
        anchor_id: String,
        query_dir: PathBuf,
        query_id: String,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run the pipeline over a manifest and report accuracy metrics.
    Evaluate {
        manifest: PathBuf,
        /// Dataset root holding scene directories and `models/`.
        #[arg(long)]
        root: PathBuf,
        /// Print a text summary instead of JSON.
        #[arg(long)]
        human: bool,
        /// Image dimension for MSPD thresholds: `width` or `max`.
        #[arg(long, default_value = "width")]
        mspd_dimension: String,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Write synthetic pairs with ground truth in the on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// cup_with_handle, box, cylinder or asymmetric_blob
        #[arg(long, default_value = "cup_with_handle")]
        kind: String,
        /// Object size, meters.
        #[arg(long, default_value_t = 0.1)]
        size: f64,
        /// Pair 0 uses the reference motion, later pairs random ones.
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        depth_sigma: f64,
        #[arg(long, default_value_t = 0.0)]
        outlier_frac: f64,
        #[arg(long, default_value_t = 0.0)]
        saliency_sigma: f64,
        /// Largest random rotation about the object, degrees.
        #[arg(long, default_value_t = 30.0)]
        max_angle: f64,
        /// Largest random shift, meters.
        #[arg(long, default_value_t = 0.05)]
        max_shift: f64,
    },
    /// Greedy forward selection of concept labels by BOP AR.
    SelectConcepts {
        manifest: PathBuf,
        #[arg(long)]
        root: PathBuf,
        /// Comma-separated labels; defaults to every label of the first pair.
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        budget: usize,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Describe the on-disk formats.
    Formats,
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    /// Pool concept vectors on a voxel grid before matching.
    #[arg(long)]
    voxelize: bool,
    #[arg(long)]
    resolution: Option<usize>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// forward_kl, reverse_kl, bidirectional_kl, asymmetric or cosine
    #[arg(long)]
    measure: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// RANSAC inlier threshold, meters.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_corr: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Neighbours used by the local outlier filter.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    std_ratio: Option<f64>,
    #[arg(long)]
    sigma_mult: Option<f64>,
    #[arg(long)]
    no_icp: bool,
    /// key=value file with the same settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

/// Apply one `key=value` setting; `_` and `-` are interchangeable in keys.
pub fn apply_setting(config: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    let key = key.replace('_', "-");
    match key.as_str() {
        "voxelize" => config.voxelize = parse(&key, value)?,
        "voxelize-before-filter" => config.voxelize_before_filter = parse(&key, value)?,
        "resolution" => config.resolution = parse(&key, value)?,
        "tau" => config.temperature = parse(&key, value)?,
        "measure" => config.measure = value.parse()?,
        "iterations" => config.iterations = Some(parse(&key, value)?),
        "threshold" => config.inlier_threshold = parse(&key, value)?,
        "max-corr" => config.max_correspondences = Some(parse(&key, value)?),
        "seed" => config.seed = parse(&key, value)?,
        "k" => config.filter.k = parse(&key, value)?,
        "std-ratio" => config.filter.std_ratio = parse(&key, value)?,
        "sigma-mult" => config.filter.sigma_mult = parse(&key, value)?,
        "no-icp" => config.icp_enabled = !parse::<bool>(&key, value)?,
        _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
    }
    Ok(())
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
                path: path.clone(),
                message: e.to_string(),
            })?;
            for (k, v) in parse_key_values(&text)? {
                apply_setting(&mut c, &k, &v)?;
            }
        }
        if self.voxelize {
            c.voxelize = true;
        }
        if let Some(v) = self.resolution {
            c.resolution = v;
        }
        if let Some(v) = self.tau {
            c.temperature = v;
        }
        if let Some(v) = &self.measure {
            c.measure = v.parse()?;
        }
        if let Some(v) = self.iterations {
            c.iterations = Some(v);
        }
        if let Some(v) = self.threshold {
            c.inlier_threshold = v;
        }
        if let Some(v) = self.max_corr {
            c.max_correspondences = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.k {
            c.filter.k = v;
        }
        if let Some(v) = self.std_ratio {
            c.filter.std_ratio = v;
        }
        if let Some(v) = self.sigma_mult {
            c.filter.sigma_mult = v;
        }
        if self.no_icp {
            c.icp_enabled = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    /// Anchor camera to query camera: `x_q = R x_a + t`.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    estimate: &'a PoseEstimate,
    diagnostics: &'a Diagnostics,
    config: &'a PipelineConfig,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

fn run_estimate(anchor_dir: &Path, anchor_id: &str, query_dir: &Path, query_id: &str, args: &PipelineArgs) -> Result<String> {
    let config = args.resolve()?;
    let anchor = load_frame(anchor_dir, anchor_id)?;
    let anchor_sal = read_saliency(&FramePaths::new(anchor_dir, anchor_id).saliency)?;
    let query = load_frame(query_dir, query_id)?;
    let query_sal = read_saliency(&FramePaths::new(query_dir, query_id).saliency)?;
    let out = estimate_relative_pose((&anchor, &anchor_sal), (&query, &query_sal), &config)?;
    let t = &out.diagnostics.timings;
    log::info!(
        "timings: clouds {:?}, filtering {:?}, voxelization {:?}, correspondence {:?}, ransac {:?}, icp {:?}",
        t.clouds,
        t.filtering,
        t.voxelization,
        t.correspondence,
        t.ransac,
        t.icp
    );
    let r = out.estimate.transform.rotation;
    let tr = out.estimate.transform.translation;
    Ok(to_json(&EstimateOutput {
        rotation: [[r[(0, 0)], r[(0, 1)], r[(0, 2)]], [r[(1, 0)], r[(1, 1)], r[(1, 2)]], [r[(2, 0)], r[(2, 1)], r[(2, 2)]]],
        translation: [tr.x, tr.y, tr.z],
        estimate: &out.estimate,
        diagnostics: &out.diagnostics,
        config: &config,
    }))
}

/// Load every manifest pair with its frames, saliencies, model and poses.
pub fn load_cases(manifest: &Path, root: &Path) -> Result<Vec<EvalCase>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Ingestion {
            path: manifest.to_path_buf(),
            message: "manifest lists no pairs".into(),
        });
    }
    let mut models: std::collections::HashMap<String, Arc<crate::model::ObjectModel>> = Default::default();
    let mut cases = Vec::with_capacity(entries.len());
    for e in entries {
        let missing_pose = || Error::Ingestion {
            path: manifest.to_path_buf(),
            message: format!("pair '{}' has no ground-truth poses", e.pair_id),
        };
        let anchor_pose = e.anchor_pose()?.ok_or_else(missing_pose)?;
        let query_pose = e.query_pose()?.ok_or_else(missing_pose)?;
        let model = match models.get(&e.object_id) {
            Some(m) => m.clone(),
            None => {
                let m = Arc::new(load_model(&root.join("models").join(format!("{}.json", e.object_id)))?);
                models.insert(e.object_id.clone(), m.clone());
                m
            }
        };
        let frame = |r: &FrameRef| -> Result<_> {
            let dir = root.join(&r.scene_id);
            Ok((load_frame(&dir, &r.frame_id)?, read_saliency(&FramePaths::new(&dir, &r.frame_id).saliency)?))
        };
        let (anchor, anchor_saliency) = frame(&e.anchor)?;
        let (query, query_saliency) = frame(&e.query)?;
        cases.push(EvalCase {
            pair_id: e.pair_id,
            object_id: e.object_id,
            model,
            anchor,
            anchor_saliency,
            query,
            query_saliency,
            anchor_pose,
            query_pose,
        });
    }
    Ok(cases)
}

fn human_report(r: &DatasetReport) -> String {
    let a = &r.aggregates;
    let pct = |v: f64| format!("{:6.2}", 100.0 * v);
    let mut s = String::new();
    s += &format!("pairs            {}\n", a.pairs);
    s += &format!("failures         {}\n", a.failures);
    s += &format!("ADD(-S) 0.1d     {}\n", pct(a.add_adaptive_recall));
    s += &format!("ADD AUC          {}\n", pct(a.add_auc));
    s += &format!("ADD-S AUC        {}\n", pct(a.add_s_auc));
    match a.bop.ar_vsd {
        Some(v) => s += &format!("AR VSD           {}\n", pct(v)),
        None => s += "AR VSD           n/a\n",
    }
    s += &format!("AR MSSD          {}\n", pct(a.bop.ar_mssd));
    s += &format!("AR MSPD          {}\n", pct(a.bop.ar_mspd));
    s += &format!("BOP AR           {}\n", pct(a.bop.bop_ar));
    s += &format!("10deg 5cm        {}\n", pct(a.recall_10deg_5cm));
    s += &format!("5deg 2cm         {}\n", pct(a.recall_5deg_2cm));
    s += &format!("3D mIoU          {}\n", pct(a.iou_mean));
    s += &format!("3D IoU@50        {}\n", pct(a.iou_50));
    s += &format!("3D IoU@75        {}\n", pct(a.iou_75));
    s
}

#[allow(clippy::too_many_arguments)]
fn run_synth(
    out: &Path,
    kind: &str,
    size: f64,
    pairs: usize,
    seed: u64,
    noise: NoiseConfig,
    max_angle: f64,
    max_shift: f64,
) -> Result<String> {
    let kind: ObjectKind = kind.parse()?;
    let object = make_object(kind, size)?;
    let k = default_intrinsics();
    fs::create_dir_all(out.join("models"))?;
    save_model(&out.join("models").join(format!("{}.json", kind.name())), &object.model)?;
    let pivot = canonical_pose(&object).apply(&object.center());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let mut attempt = 0;
        let pair = loop {
            let t_rel = if i == 0 {
                reference_relative_pose()
            } else {
                random_relative_pose(&mut rng, &pivot, max_angle, max_shift)
            };
            match make_pair(&object, &object.field, &t_rel, &k, &noise, seed.wrapping_add(i as u64)) {
                Ok(p) => break p,
                Err(Error::DegenerateGeometry(_)) if i > 0 && attempt < 100 => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        let scene = format!("pair_{i:04}");
        let dir = out.join(&scene);
        for (id, view) in [("anchor", &pair.anchor), ("query", &pair.query)] {
            save_frame(&dir, id, &view.frame)?;
            write_saliency(&FramePaths::new(&dir, id).saliency, &view.saliency)?;
        }
        entries.push(PairManifestEntry {
            pair_id: scene.clone(),
            anchor: FrameRef {
                scene_id: scene.clone(),
                frame_id: "anchor".into(),
            },
            query: FrameRef {
                scene_id: scene.clone(),
                frame_id: "query".into(),
            },
            object_id: kind.name().into(),
            category: object.category.clone(),
            anchor_pose: Some(pair.anchor.object_pose.to_row_major().to_vec()),
            query_pose: Some(pair.query.object_pose.to_row_major().to_vec()),
        });
    }
    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(format!("{}\n", manifest.display()))
}

const FORMATS: &str = "\
CSAL saliency tensor (little-endian):
  bytes 0-3   magic \"CSAL\"
  u32         version (1)
  u32 x3      L, H, W
  u16 + UTF-8 category
  u16 + UTF-8 label, repeated L times
  f32 x L*H*W values in [0, 1], concept-major then row-major

Frame directory, one frame {id}:
  {id}_rgb.png          8-bit RGB
  {id}_depth.png        16-bit grayscale, millimeters, 0 = missing
  {id}_mask.png         8-bit grayscale, nonzero = object
  {id}_intrinsics.txt   key=value lines: fx fy cx cy width height
  {id}.csal             saliency tensor

Manifest: one JSON object per line
  {\"pair_id\", \"anchor\": {\"scene_id\", \"frame_id\"}, \"query\": {...},
   \"object_id\", \"category\", \"anchor_pose\"?, \"query_pose\"?}
  poses are 12 numbers: rotation row-major, then translation (meters)
  frames are read from ROOT/scene_id/, models from ROOT/models/object_id.json

Model JSON:
  {\"vertices\": [[x,y,z],...], \"triangles\": [[i,j,k],...], \"diameter\"?,
   \"is_symmetric\", \"discrete_symmetries\": [[12 numbers],...],
   \"continuous_symmetries\": [{\"axis\": [x,y,z], \"offset\": [x,y,z]}]}

Config file: key=value lines mirroring the flags (voxelize, resolution, tau,
  measure, iterations, threshold, max_corr, seed, k, std_ratio, sigma_mult,
  no_icp); command-line flags override the file.
";

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Estimate {
            anchor_dir,
            anchor_id,
            query_dir,
            query_id,
            pipeline,
        } => run_estimate(&anchor_dir, &anchor_id, &query_dir, &query_id, &pipeline),
        Command::Evaluate {
            manifest,
            root,
            human,
            mspd_dimension,
            pipeline,
        } => {
            let config = pipeline.resolve()?;
            let metrics = MetricConfig {
                mspd_dimension: match mspd_dimension.as_str() {
                    "width" => ImageDimension::Width,
                    "max" => ImageDimension::Max,
                    other => return Err(Error::Config(format!("unknown image dimension '{other}'"))),
                },
                ..MetricConfig::default()
            };
            let cases = load_cases(&manifest, &root)?;
            let report = evaluate_cases(&cases, &config, &metrics)?;
            Ok(if human { human_report(&report) } else { to_json(&report) })
        }
        Command::Synth {
            out,
            kind,
            size,
            pairs,
            seed,
            depth_sigma,
            outlier_frac,
            saliency_sigma,
            max_angle,
            max_shift,
        } => run_synth(
            &out,
            &kind,
            size,
            pairs,
            seed,
            NoiseConfig {
                depth_sigma,
                saliency_sigma,
                outlier_frac,
            },
            max_angle,
            max_shift,
        ),
        Command::SelectConcepts {
            manifest,
            root,
            candidates,
            budget,
            pipeline,
        } => {
            let config = pipeline.resolve()?;
            let cases = load_cases(&manifest, &root)?;
            let candidates = candidates.unwrap_or_else(|| cases[0].anchor_saliency.labels.clone());
            let curve = select_concepts_greedy(&cases, &candidates, budget, &config, &MetricConfig::default())?;
            Ok(to_json(&curve))
        }
        Command::Formats => Ok(FORMATS.to_string()),
    }
}

/// Outcome of one invocation: exit status plus what to print on each stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub status: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run<I, T>(args: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let status = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            return if e.use_stderr() {
                Outcome {
                    status,
                    stdout: String::new(),
                    stderr: text,
                }
            } else {
                Outcome {
                    status,
                    stdout: text,
                    stderr: String::new(),
                }
            };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command)),
        Err(e) => Err(Error::Config(format!("cannot start worker threads: {e}"))),
    };
    match result {
        Ok(stdout) => Outcome {
            status: EXIT_OK,
            stdout,
            stderr: String::new(),
        },
        Err(e) => Outcome {
            status: if e.is_no_consensus() { EXIT_NO_CONSENSUS } else { EXIT_INPUT },
            stdout: String::new(),
            stderr: format!("error: {e}\n"),
        },
    }
}
