use std::path::Path;
use std::time::Instant;

use key2mesh::adapt::{moving_average, run_adapt};
use key2mesh::body::toy::make_toy_model;
use key2mesh::camera::FixedCamera;
use key2mesh::chkpt::{load_checkpoint, load_networks};
use key2mesh::config::RunConfig;
use key2mesh::datagen::{make_pair, pair_seed, AugConfig, TrainingPair};
use key2mesh::dataio::synth_mocap;
use key2mesh::dataio::frames_from_pairs;
use key2mesh::network::Networks;
use key2mesh::pretrain::{eval_pa_mpjpe, run_pretrain};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn target_pairs(
    model: &key2mesh::body::BodyModel,
    cam: &FixedCamera,
    seed: u64,
    n: usize,
) -> Vec<TrainingPair> {
    let aug = AugConfig { rotate: true, jitter_sigma: 3.0, occlude_p: 0.4 };
    let set = synth_mocap(seed, n, model, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(seed, 0, i as u64));
            make_pair(&set, i, model, cam, &aug, &mut rng).unwrap()
        })
        .collect()
}

#[test]
fn calibrate_desk_scale() {
    let dir = Path::new("/tmp/acc_probe");
    std::fs::create_dir_all(dir).unwrap();
    let model = make_toy_model(0, 64, 16, 12).unwrap();
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = 2;
    let cam = cfg.camera.clone();

    let best_path = dir.join("pre/best.k2mc");
    if !best_path.exists() {
        let mocap = synth_mocap(cfg.seed, 20000, &model, 1.0).unwrap();
        let t0 = Instant::now();
        let out = run_pretrain(&model, &mocap, &cfg, &dir.join("pre")).unwrap();
        println!(
            "pretrain: {} steps in {:.1}s  loss {:.4} -> {:.4} (ratio {:.4})",
            out.steps,
            t0.elapsed().as_secs_f64(),
            out.initial_loss,
            out.final_loss,
            out.final_loss / out.initial_loss
        );
        println!(
            "pretrain: best PA {:.2} mm at step {}, baseline {:.2} mm (ratio {:.4})",
            out.best_pa_mpjpe_mm,
            out.best_step,
            out.baseline_pa_mpjpe_mm,
            out.best_pa_mpjpe_mm / out.baseline_pa_mpjpe_mm
        );
    } else {
        println!("pretrain: cached");
    }
    let ck = load_checkpoint(&best_path).unwrap();
    let pre: Networks = load_networks(&ck, "f").unwrap();

    let tpairs = target_pairs(&model, &cam, 1000, 2000);
    let frames = frames_from_pairs(&tpairs);
    let sel = target_pairs(&model, &cam, 1001, 400);
    let eval = target_pairs(&model, &cam, 1002, 800);
    let pre_pa = eval_pa_mpjpe(&pre, &model, &eval).unwrap();
    println!("pretrained PA on target eval set: {:.2} mm", pre_pa);

    let mocap = synth_mocap(cfg.seed, 20000, &model, 1.0).unwrap();
    cfg.adapt.select_every = 10;
    for (tag, w6, w7) in [("full", cfg.adapt.w6, cfg.adapt.w7), ("l2d-only", 0.0, 0.0)] {
        let mut c = cfg.clone();
        c.adapt.w6 = w6;
        c.adapt.w7 = w7;
        let out_dir = dir.join(tag);
        let t0 = Instant::now();
        let out = run_adapt(&model, &mocap, &frames, &pre, &c, Some(&sel), &out_dir).unwrap();
        let ak = load_checkpoint(&out_dir.join("best.k2mc")).unwrap();
        let anets: Networks = load_networks(&ak, "f").unwrap();
        let pa = eval_pa_mpjpe(&anets, &model, &eval).unwrap();
        println!(
            "{}: {} steps in {:.1}s  sel {:.2} -> best {:.2} (step {})  eval PA {:.2} mm ({:+.1}%)",
            tag,
            out.steps,
            t0.elapsed().as_secs_f64(),
            out.initial_value,
            out.best_value,
            out.best_step,
            pa,
            100.0 * (pa - pre_pa) / pre_pa
        );
        let ma = moving_average(&out.abs_lwd_series, 100);
        let n = ma.len();
        let dec = (n / 10).max(1);
        let first: f64 = ma[..dec].iter().sum::<f64>() / dec as f64;
        let last: f64 = ma[n - dec..].iter().sum::<f64>() / dec as f64;
        println!("{}: |L_wd| MA first decile {:.6}, last decile {:.6}", tag, first, last);
    }
}

#[test]
fn feasibility_long_pretrain() {
    let dir = Path::new("/tmp/acc_probe/long");
    std::fs::create_dir_all(dir).unwrap();
    let model = make_toy_model(0, 64, 16, 12).unwrap();
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = 10;
    let mocap = synth_mocap(cfg.seed, 20000, &model, 1.0).unwrap();
    let t0 = Instant::now();
    let out = run_pretrain(&model, &mocap, &cfg, dir).unwrap();
    println!(
        "long pretrain: {} steps in {:.1}s  loss {:.4} -> {:.4} (ratio {:.4})",
        out.steps,
        t0.elapsed().as_secs_f64(),
        out.initial_loss,
        out.final_loss,
        out.final_loss / out.initial_loss
    );
    println!(
        "long pretrain: best PA {:.2} mm at step {}, baseline {:.2} mm (ratio {:.4})",
        out.best_pa_mpjpe_mm, out.best_step, out.baseline_pa_mpjpe_mm,
        out.best_pa_mpjpe_mm / out.baseline_pa_mpjpe_mm
    );
    for (s, pa) in &out.eval_series {
        println!("  eval step {:>5}: PA {:.2} mm", s, pa);
    }
}

#[test]
fn overfit_one_batch() {
    use key2mesh::diff::{Adam, AdamConfig, Tensor};
    use key2mesh::network::init_params;
    use key2mesh::pretrain::{pretrain_grads, PairBatch};

    let model = make_toy_model(0, 64, 16, 12).unwrap();
    let cfg = RunConfig::default();
    let cam = cfg.camera.clone();
    let set = synth_mocap(0, 256, &model, 1.0).unwrap();
    let aug = AugConfig::disabled();
    let pairs: Vec<TrainingPair> = (0..256)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(0, 0, i as u64));
            make_pair(&set, i, &model, &cam, &aug, &mut rng).unwrap()
        })
        .collect();
    let refs: Vec<&TrainingPair> = pairs.iter().collect();
    let batch = PairBatch::from_pairs(&refs).unwrap();

    let mut nets = init_params(0, 12, 16, 1024).unwrap();
    let fl = nets.f.param_list("f");
    let hl = nets.h.param_list("h");
    let reg: Vec<(String, &Tensor)> =
        fl.iter().chain(hl.iter()).map(|(n, t)| (n.clone(), t)).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.pretrain.lr), &reg);
    let t0 = Instant::now();
    for step in 0..400u64 {
        let (bd, grads) = pretrain_grads(&model, &cam, &nets, &batch, &cfg.pretrain, step).unwrap();
        if step % 25 == 0 {
            let gn: f64 = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            println!(
                "step {:>3}: total {:>9.3} th {:.4} be {:.4} 2d {:.4} 3d {:.4} |g| {:.3e} ({:.1}s)",
                step, bd.l_total, bd.l_theta, bd.l_beta, bd.l_2d, bd.l_3d, gn,
                t0.elapsed().as_secs_f64()
            );
        }
        let fm = nets.f.params_mut();
        let mut prefs: Vec<(&mut Tensor, &Tensor)> = fm.into_iter().zip(&grads).collect();
        let nf = prefs.len();
        let hm = nets.h.params_mut();
        prefs.extend(hm.into_iter().zip(grads[nf..].iter()));
        adam.step(&mut prefs).unwrap();
    }
    let (bd, _) = pretrain_grads(&model, &cam, &nets, &batch, &cfg.pretrain, 400).unwrap();
    println!("final: total {:.3} th {:.4} be {:.4} 2d {:.4} 3d {:.4}", bd.l_total, bd.l_theta, bd.l_beta, bd.l_2d, bd.l_3d);
}
