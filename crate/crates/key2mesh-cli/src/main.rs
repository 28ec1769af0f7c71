//! Pipeline driver: every stage of the keypoints-to-mesh workflow as a
//! deterministic command. Validation problems exit 2, runtime aborts
//! exit 3, and each artifact embeds the effective config that made it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use key2mesh::body::io::{load_model, save_model};
use key2mesh::body::toy::make_toy_model;
use key2mesh::body::BodyModel;
use key2mesh::camera::fit_translation;
use key2mesh::chkpt::{load_checkpoint, load_networks, save_checkpoint, Checkpoint};
use key2mesh::config::RunConfig;
use key2mesh::dataio::{
    export_features, load_detections, synth_mocap, FeatureSource, KeypointMap, LoadedFrame,
};
use key2mesh::datagen::{load_mocap, make_pair, pair_seed, save_mocap, AugConfig, TrainingPair};
use key2mesh::diff::Tensor;
use key2mesh::metrics::{mpjpe, pa_mpjpe, pve, MetricsAccum};
use key2mesh::network::Networks;
use key2mesh::{Error, Result};

/// Seed salt for the labeled selection set, outside every training
/// epoch's seed range.
const SELECTION_SALT: u64 = 0x53_45_4c_45_43_54_30_31;

#[derive(Parser)]
#[command(name = "key2mesh", version, about = "Keypoints-to-mesh pipeline driver")]
struct Cli {
    /// Print the effective config as JSON and exit without running.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    cmd: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic desk-scale body model.
    MakeToyModel {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Vertex count.
        #[arg(long = "V", default_value_t = 64)]
        vertices: usize,
        /// Joint count.
        #[arg(long = "K", default_value_t = 16)]
        joints: usize,
        /// Keypoint count.
        #[arg(long = "k", default_value_t = 12)]
        keypoints: usize,
        #[arg(long, default_value = "toy.k2m")]
        out: PathBuf,
    },
    /// Sample a synthetic mocap set for a body model.
    SynthMocap {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of frames.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        model: PathBuf,
        /// Pose angle spread multiplier; 0 keeps every frame at rest.
        #[arg(long, default_value_t = 1.0)]
        pose_spread: f64,
        #[arg(long, default_value = "mocap.mcp")]
        out: PathBuf,
    },
    /// Pre-train the regressor on synthesized keypoint/parameter pairs.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mocap: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Adapt a pre-trained checkpoint to a target detection set. The
    /// source model and mocap paths come from the config's `paths`.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target-domain detections, JSON-lines.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Labeled mocap for checkpoint selection; without it selection
        /// falls back to held-out reprojection error.
        #[arg(long)]
        selection_set: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Detections to evaluate; ground truth comes from the config's
        /// `paths.mocap`, aligned by frame number.
        #[arg(long, conflicts_with = "synthetic_target", required_unless_present = "synthetic_target")]
        detections: Option<PathBuf>,
        /// Mocap set to synthesize an evaluation target from instead.
        #[arg(long)]
        synthetic_target: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Worker threads; falls back to K2M_THREADS, then the config.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the regressor on detections and write per-frame parameters
    /// and meshes. The body model comes from the config's `paths.model`.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out_meshes: PathBuf,
        /// Also recover a per-frame camera-space root translation.
        #[arg(long)]
        fit_translation: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Dump eval-mode features of one extractor for external analysis.
    ExportFeatures {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure single-forward latency of the regressor.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated batch sizes.
        #[arg(long, default_value = "1,512", value_delimiter = ',')]
        batch_sizes: Vec<usize>,
        /// Timed iterations per batch size.
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    /// The adapted extractor (or the only one, pre-adaptation).
    F,
    /// The frozen pre-trained extractor.
    #[value(name = "f_pt")]
    FPt,
}

fn main() {
    let code = match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                3
            }
        }
    };
    std::process::exit(code);
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let Some(cmd) = cli.cmd else {
        if cli.print_config {
            println!("{}", RunConfig::default().to_pretty_json());
            return Ok(());
        }
        return Err(Error::InvalidParameter("a command is required; see --help".into()));
    };
    if cli.print_config {
        let cfg = load_config(cmd_config_path(&cmd))?;
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    match cmd {
        Cmd::MakeToyModel { seed, vertices, joints, keypoints, out } => {
            let model = make_toy_model(seed, vertices, joints, keypoints)?;
            save_model(&model, &out)?;
            println!(
                "wrote {} (V={} K={} k={})",
                out.display(),
                model.num_vertices(),
                model.num_joints(),
                model.num_keypoints()
            );
            Ok(())
        }
        Cmd::SynthMocap { seed, n, model, pose_spread, out } => {
            let model = load_model(&model)?;
            let set = synth_mocap(seed, n, &model, pose_spread)?;
            save_mocap(&set, &out)?;
            println!("wrote {} ({} frames, {} joints)", out.display(), set.len(), set.num_joints());
            Ok(())
        }
        Cmd::Pretrain { config, model, mocap, out_dir } => {
            cmd_pretrain(config.as_deref(), &model, &mocap, &out_dir)
        }
        Cmd::Adapt { config, checkpoint, target, out_dir, selection_set } => cmd_adapt(
            config.as_deref(),
            &checkpoint,
            &target,
            &out_dir,
            selection_set.as_deref(),
        ),
        Cmd::Eval { config, checkpoint, model, detections, synthetic_target, report, threads } => {
            cmd_eval(
                config.as_deref(),
                &checkpoint,
                &model,
                detections.as_deref(),
                synthetic_target.as_deref(),
                &report,
                threads,
            )
        }
        Cmd::Infer { config, checkpoint, detections, out_meshes, fit_translation, threads } => {
            cmd_infer(
                config.as_deref(),
                &checkpoint,
                &detections,
                &out_meshes,
                fit_translation,
                threads,
            )
        }
        Cmd::ExportFeatures { config, checkpoint, detections, which, out } => {
            cmd_export_features(config.as_deref(), &checkpoint, &detections, which, &out)
        }
        Cmd::Bench { checkpoint, batch_sizes, iters } => cmd_bench(&checkpoint, &batch_sizes, iters),
    }
}

fn cmd_config_path(cmd: &Cmd) -> Option<&Path> {
    match cmd {
        Cmd::Pretrain { config, .. }
        | Cmd::Adapt { config, .. }
        | Cmd::Eval { config, .. }
        | Cmd::Infer { config, .. }
        | Cmd::ExportFeatures { config, .. } => config.as_deref(),
        _ => None,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Worker count: flag, then K2M_THREADS, then the config; 0 means 1.
fn resolve_threads(flag: Option<usize>, cfg: &RunConfig) -> Result<usize> {
    if let Some(t) = flag {
        return Ok(t.max(1));
    }
    if let Ok(v) = std::env::var("K2M_THREADS") {
        let t: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("K2M_THREADS={v:?} is not a count")))?;
        return Ok(t.max(1));
    }
    Ok(cfg.threads.max(1))
}

/// Apply `work` to every index, fanned out over contiguous chunks. Each
/// index writes only its own slot, so the output is independent of the
/// worker count.
fn parallel_map<T, F>(n: usize, threads: usize, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let t = threads.clamp(1, n.max(1));
    if t <= 1 {
        return (0..n).map(work).collect();
    }
    let chunk = n.div_ceil(t);
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        for (ci, slots) in out.chunks_mut(chunk).enumerate() {
            let work = &work;
            s.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(work(ci * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("every slot filled")).collect()
}

fn require_compatible(nets: &Networks, model: &BodyModel) -> Result<()> {
    let k = nets.f.input_dim() / 2;
    let kj = (nets.h.output_dim() - 10) / 6;
    if k != model.num_keypoints() || kj != model.num_joints() {
        return Err(Error::Incompatible(format!(
            "checkpoint expects k={} K={}, model has k={} K={}",
            k,
            kj,
            model.num_keypoints(),
            model.num_joints()
        )));
    }
    Ok(())
}

fn cmd_pretrain(config: Option<&Path>, model: &Path, mocap: &Path, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_model(model)?;
    let mocap = load_mocap(mocap)?;
    match key2mesh::pretrain::run_pretrain(&model, &mocap, &cfg, out_dir) {
        Ok(out) => {
            println!(
                "pretrain done: {} steps, loss {:.4} -> {:.4}, held-out PA-MPJPE {:.2} mm \
                 (rest-pose baseline {:.2} mm) at step {}",
                out.steps,
                out.initial_loss,
                out.final_loss,
                out.best_pa_mpjpe_mm,
                out.baseline_pa_mpjpe_mm,
                out.best_step
            );
            println!("best checkpoint: {}", out.best_path.display());
            println!("final checkpoint: {}", out.final_path.display());
            Ok(())
        }
        Err(e) => {
            eprintln!("log: {}", out_dir.join("pretrain_log.jsonl").display());
            Err(e)
        }
    }
}

fn cmd_adapt(
    config: Option<&Path>,
    checkpoint: &Path,
    target: &Path,
    out_dir: &Path,
    selection_set: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model_path = cfg.paths.model.clone().ok_or_else(|| {
        Error::InvalidParameter("adapt needs the source body model at config paths.model".into())
    })?;
    let mocap_path = cfg.paths.mocap.clone().ok_or_else(|| {
        Error::InvalidParameter("adapt needs the source mocap at config paths.mocap".into())
    })?;
    let model = load_model(&model_path)?;
    let mocap = load_mocap(&mocap_path)?;
    let ck = load_checkpoint(checkpoint)?;
    let nets = load_networks(&ck, "f")?;
    require_compatible(&nets, &model)?;

    let k = model.num_keypoints();
    let det = load_detections(target, &KeypointMap::identity(k), 2, cfg.eval.conf_threshold)?;
    if det.dropped > 0 {
        eprintln!("target: dropped {} frames below 2 visible keypoints", det.dropped);
    }

    let selection: Option<Vec<TrainingPair>> = match selection_set {
        Some(p) => Some(synthesize_selection(&load_mocap(p)?, &model, &cfg)?),
        None => None,
    };

    match key2mesh::adapt::run_adapt(
        &model,
        &mocap,
        &det.frames,
        &nets,
        &cfg,
        selection.as_deref(),
        out_dir,
    ) {
        Ok(out) => {
            println!(
                "adapt done: {} steps, {} {:.4} -> {:.4} (best {:.4} at step {}), \
                 {} frames skipped",
                out.steps,
                out.criterion,
                out.initial_value,
                out.final_value,
                out.best_value,
                out.best_step,
                out.skipped_frames
            );
            println!("best checkpoint: {}", out.best_path.display());
            println!("final checkpoint: {}", out.final_path.display());
            Ok(())
        }
        Err(e) => {
            eprintln!("log: {}", out_dir.join("adapt_log.jsonl").display());
            Err(e)
        }
    }
}

/// Clean (augmentation-free) labeled pairs for checkpoint selection.
fn synthesize_selection(
    mocap: &key2mesh::datagen::MocapSet,
    model: &BodyModel,
    cfg: &RunConfig,
) -> Result<Vec<TrainingPair>> {
    let aug = AugConfig::disabled();
    let mut out = Vec::with_capacity(mocap.len());
    for i in 0..mocap.len() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed ^ SELECTION_SALT, 0, i as u64));
        out.push(make_pair(mocap, i, model, &cfg.camera, &aug, &mut rng)?);
    }
    Ok(out)
}

/// Per-frame evaluation input: network input row plus ground truth.
struct EvalFrame {
    input: Tensor,
    gt_rots: Vec<[f64; 9]>,
    gt_beta: Vec<f64>,
}

fn rots_from_pose(pose: &[f64]) -> Vec<[f64; 9]> {
    use key2mesh::body::rotation::rodrigues;
    (0..pose.len() / 3)
        .map(|j| rodrigues([pose[3 * j], pose[3 * j + 1], pose[3 * j + 2]]))
        .collect()
}

fn cmd_eval(
    config: Option<&Path>,
    checkpoint: &Path,
    model: &Path,
    detections: Option<&Path>,
    synthetic_target: Option<&Path>,
    report: &Path,
    threads: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let threads = resolve_threads(threads, &cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let nets = load_networks(&ck, "f")?;
    let model = load_model(model)?;
    require_compatible(&nets, &model)?;

    let mut skipped = 0usize;
    let frames: Vec<EvalFrame> = if let Some(mcp) = synthetic_target {
        let mocap = load_mocap(mcp)?;
        if mocap.num_joints() != model.num_joints() {
            return Err(Error::Incompatible(format!(
                "mocap has {} joints, model has {}",
                mocap.num_joints(),
                model.num_joints()
            )));
        }
        let mut out = Vec::with_capacity(mocap.len());
        for i in 0..mocap.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, 0, i as u64));
            match make_pair(&mocap, i, &model, &cfg.camera, &cfg.aug, &mut rng) {
                Ok(p) => out.push(EvalFrame {
                    input: p.input.clone(),
                    gt_rots: rots_from_pose(p.theta.data()),
                    gt_beta: p.beta.data().to_vec(),
                }),
                Err(Error::AugmentationFailed(_)) | Err(Error::DegenerateFrame { .. }) => {
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        out
    } else {
        let det_path = detections.expect("clap enforces one evaluation source");
        let mocap_path = cfg.paths.mocap.clone().ok_or_else(|| {
            Error::InvalidParameter(
                "evaluating detections needs ground truth at config paths.mocap".into(),
            )
        })?;
        let mocap = load_mocap(&mocap_path)?;
        if mocap.num_joints() != model.num_joints() {
            return Err(Error::Incompatible(format!(
                "mocap has {} joints, model has {}",
                mocap.num_joints(),
                model.num_joints()
            )));
        }
        let det = load_detections(
            det_path,
            &KeypointMap::identity(model.num_keypoints()),
            cfg.eval.min_visible,
            cfg.eval.conf_threshold,
        )?;
        skipped = det.dropped;
        let mut out = Vec::with_capacity(det.frames.len());
        for f in &det.frames {
            let idx = usize::try_from(f.frame.frame)
                .ok()
                .filter(|i| *i < mocap.len())
                .ok_or_else(|| {
                    Error::Incompatible(format!(
                        "detection frame {} has no mocap ground truth (set has {} frames)",
                        f.frame.frame,
                        mocap.len()
                    ))
                })?;
            out.push(EvalFrame {
                input: f.x_norm.clone(),
                gt_rots: rots_from_pose(mocap.pose(idx)),
                gt_beta: mocap.beta(idx).to_vec(),
            });
        }
        out
    };

    let results: Vec<Result<(f64, f64, f64)>> = parallel_map(frames.len(), threads, |i| {
        let f = &frames[i];
        let row = Tensor::new(vec![1, f.input.len()], f.input.data().to_vec())?;
        let pred = nets.predict(&row)?;
        let rots: Vec<[f64; 9]> = (0..model.num_joints())
            .map(|j| {
                let mut m = [0.0; 9];
                m.copy_from_slice(&pred.rots.data()[9 * j..9 * j + 9]);
                m
            })
            .collect();
        let (v_pred, j_pred) = model.skin(&rots, &pred.betas.data()[..10])?;
        let (v_gt, j_gt) = model.skin(&f.gt_rots, &f.gt_beta)?;
        let kp_pred = model.regress_keypoints(&v_pred)?;
        let kp_gt = model.regress_keypoints(&v_gt)?;
        let pa = pa_mpjpe(&kp_pred, &kp_gt)?;
        let mp = mpjpe(&kp_pred, &kp_gt, 0)?;
        let pv = pve(
            &v_pred,
            &v_gt,
            [j_pred.at(0, 0), j_pred.at(0, 1), j_pred.at(0, 2)],
            [j_gt.at(0, 0), j_gt.at(0, 1), j_gt.at(0, 2)],
        )?;
        Ok((pa, mp, pv))
    });

    let mut accum = MetricsAccum::new();
    for _ in 0..skipped {
        accum.skip();
    }
    for r in results {
        let (pa, mp, pv) = r?;
        accum.push(pa, mp, pv);
    }
    let rep = accum.report(cfg.echo(), cfg.eval.per_frame);
    let text = serde_json::to_string_pretty(&rep)
        .map_err(|e| Error::InvalidParameter(format!("report: {e}")))?;
    std::fs::write(report, text.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", report.display()), e))?;
    println!(
        "evaluated {} frames ({} skipped): PA-MPJPE {:.2} mm, MPJPE {:.2} mm, PVE {:.2} mm",
        rep.n_frames, rep.n_skipped, rep.pa_mpjpe_mm, rep.mpjpe_mm, rep.pve_mm
    );
    println!("report: {}", report.display());
    Ok(())
}

struct InferRow {
    theta: Tensor,
    betas: Tensor,
    verts: Tensor,
    tau: Option<Tensor>,
    warn: Option<String>,
}

fn cmd_infer(
    config: Option<&Path>,
    checkpoint: &Path,
    detections: &Path,
    out_meshes: &Path,
    fit: bool,
    threads: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let threads = resolve_threads(threads, &cfg)?;
    let ck = load_checkpoint(checkpoint)?;
    let nets = load_networks(&ck, "f")?;
    let model_path = cfg.paths.model.clone().ok_or_else(|| {
        Error::InvalidParameter("infer needs the body model at config paths.model".into())
    })?;
    let model = load_model(&model_path)?;
    require_compatible(&nets, &model)?;

    let det = load_detections(
        detections,
        &KeypointMap::identity(model.num_keypoints()),
        cfg.eval.min_visible,
        cfg.eval.conf_threshold,
    )?;
    if det.frames.is_empty() {
        return Err(Error::InvalidParameter("no frames survive the visibility filter".into()));
    }

    let cam = &cfg.camera;
    let results: Vec<Result<InferRow>> = parallel_map(det.frames.len(), threads, |i| {
        let f: &LoadedFrame = &det.frames[i];
        let row = Tensor::new(vec![1, f.x_norm.len()], f.x_norm.data().to_vec())?;
        let pred = nets.predict(&row)?;
        let rots: Vec<[f64; 9]> = (0..model.num_joints())
            .map(|j| {
                let mut m = [0.0; 9];
                m.copy_from_slice(&pred.rots.data()[9 * j..9 * j + 9]);
                m
            })
            .collect();
        let (verts, joints) = model.skin(&rots, &pred.betas.data()[..10])?;
        let theta = Tensor::new(vec![model.num_joints(), 3], pred.theta(0)?)?;
        let betas = Tensor::new(vec![10], pred.betas.data()[..10].to_vec())?;
        let (tau, warn) = if fit {
            let mut kp = model.regress_keypoints(&verts)?;
            for r in 0..kp.rows() {
                for a in 0..3 {
                    kp.data_mut()[3 * r + a] -= joints.at(0, a);
                }
            }
            let px = f.norm.to_pixels(&f.x_norm);
            match fit_translation(&kp, &px, f.vis.data(), cam) {
                Ok(t) => (Some(Tensor::new(vec![3], t.to_vec())?), None),
                Err(e) => (None, Some(format!("frame {}: translation fit failed: {e}", f.frame.frame))),
            }
        } else {
            (None, None)
        };
        Ok(InferRow { theta, betas, verts, tau, warn })
    });

    let mut out = Checkpoint::new(cfg.echo(), cfg.seed, 0);
    let ids: Vec<f64> = det.frames.iter().map(|f| f.frame.frame as f64).collect();
    out.push("frames", Tensor::new(vec![ids.len()], ids)?);
    let mut fitted = 0usize;
    for (f, r) in det.frames.iter().zip(results) {
        let r = r?;
        let name = |field: &str| format!("frame_{}.{}", f.frame.frame, field);
        out.push(name("theta"), r.theta);
        out.push(name("betas"), r.betas);
        out.push(name("verts"), r.verts);
        if let Some(tau) = r.tau {
            out.push(name("tau"), tau);
            fitted += 1;
        }
        if let Some(w) = r.warn {
            eprintln!("{w}");
        }
    }
    save_checkpoint(&out, out_meshes)?;
    if fit {
        println!(
            "inferred {} frames ({} dropped, {} translations fit): {}",
            det.frames.len(),
            det.dropped,
            fitted,
            out_meshes.display()
        );
    } else {
        println!(
            "inferred {} frames ({} dropped): {}",
            det.frames.len(),
            det.dropped,
            out_meshes.display()
        );
    }
    Ok(())
}

fn cmd_export_features(
    config: Option<&Path>,
    checkpoint: &Path,
    detections: &Path,
    which: Which,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ck = load_checkpoint(checkpoint)?;
    let k = ck.get("f.b0.w")?.rows() / 2;
    let det = load_detections(
        detections,
        &KeypointMap::identity(k),
        cfg.eval.min_visible,
        cfg.eval.conf_threshold,
    )?;
    if det.frames.is_empty() {
        return Err(Error::InvalidParameter("no frames survive the visibility filter".into()));
    }
    let input = key2mesh::dataio::input_matrix(&det.frames)?;
    let source = match which {
        Which::F => FeatureSource::Adapted,
        Which::FPt => FeatureSource::Pretrained,
    };
    let feats = export_features(&ck, &input, source, out)?;
    println!(
        "wrote {} ({} x {} features, {} frames dropped)",
        out.display(),
        feats.rows(),
        feats.cols(),
        det.dropped
    );
    Ok(())
}

fn cmd_bench(checkpoint: &Path, batch_sizes: &[usize], iters: usize) -> Result<()> {
    if iters == 0 {
        return Err(Error::InvalidParameter("bench needs at least one iteration".into()));
    }
    let ck = load_checkpoint(checkpoint)?;
    let nets = load_networks(&ck, "f")?;
    let k = nets.f.input_dim() / 2;
    println!(
        "bench: eval-mode F+H forward, k={} d={}, {} timed iterations per batch size",
        k,
        nets.f.output_dim(),
        iters
    );
    for &b in batch_sizes {
        if b == 0 {
            return Err(Error::InvalidParameter("batch size 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xB43C ^ b as u64);
        let data: Vec<f64> = (0..b * 2 * k)
            .map(|_| rng.next_u64() as f64 / u64::MAX as f64 * 2.0 - 1.0)
            .collect();
        let x = Tensor::new(vec![b, 2 * k], data)?;

        let forward = |x: &Tensor| -> Result<Tensor> {
            let phi = key2mesh::adapt::eval_forward(&nets.f, x)?;
            key2mesh::adapt::eval_forward(&nets.h, &phi)
        };
        for _ in 0..(iters / 10).clamp(3, 50) {
            forward(&x)?;
        }
        let mut samples = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t0 = Instant::now();
            let out = forward(&x)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
            assert_eq!(out.rows(), b);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median = sorted[sorted.len() / 2];
        let reference = match b {
            1 => " (reference: 3.4 ms at batch 1)",
            512 => " (reference: 3.6 ms at batch 512)",
            _ => "",
        };
        println!("batch {b}: mean {mean:.3} ms, median {median:.3} ms{reference}");
    }
    Ok(())
}
