//! Scratch tuning harness (not shipped).
use panoclust_core::losses::{fragmentation_loss, impurity_loss, LossWeights};
use panoclust_core::metrics::EvalStats;
use panoclust_core::softmat::SoftMatrix;
use panoclust_core::synth::{generate, micro_taxonomy, toy_synth_config};
use panoclust_core::toytrain::{
    forward, infer, train, ModelConfig, Optimizer, SynthSource, TrainConfig,
};
use panoclust_core::types::hard_labels;

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let tax = micro_taxonomy();
    let mut synth = toy_synth_config(env_usize("SEED", 424242) as u64);
    let sep = env_f64("SEP", 0.0);
    if sep > 0.0 {
        for spec in &mut synth.class_mix {
            spec.min_separation = sep;
        }
    }
    let sr = env_f64("SCENER", 0.0);
    if sr > 0.0 {
        synth.scene_radius = sr;
    }
    let cfg = TrainConfig {
        seed: env_usize("MSEED", 1) as u64,
        learning_rate: env_f64("LR", 0.3),
        iterations: env_usize("ITERS", 2000),
        batch_size: env_usize("BATCH", 2),
        scene_pool: env_usize("POOL", 96),
        optimizer: Optimizer::Momentum { beta: env_f64("BETA", 0.9) },
        weights: LossWeights::default(),
        model: ModelConfig {
            num_classes: 9,
            clusters: 16,
            trunk_hidden: env_usize("TRUNK", 48),
            sem_hidden: env_usize("SEMH", 24),
            inst_hidden: env_usize("INSTH", 48),
            k_neighbors: 8,
            feature_scale: env_f64("FSCALE", 0.1),
            detach_skip: env_usize("DETACH", 1) == 1,
        },
    };
    let t0 = std::time::Instant::now();
    let source = SynthSource { config: synth.clone(), taxonomy: tax.clone() };
    let out = train(&cfg, &tax, &source).unwrap();
    let train_time = t0.elapsed();
    for s in out.curve.iter().step_by(out.curve.len().max(10) / 10) {
        println!(
            "iter {:5}  total {:.4}  wce {:.4}  lov {:.4}  imp {:.5}  frag {:.4}",
            s.iteration, s.total, s.wce, s.lovasz, s.impurity, s.fragmentation
        );
    }
    let last = out.curve.last().unwrap();
    println!("final: total {:.4} imp {:.5} frag {:.4}", last.total, last.impurity, last.fragmentation);

    // Held-out evaluation: 50 scenes at fresh indices.
    let mut stats = EvalStats::new();
    let mut hard_imp = 0.0;
    let mut hard_frag = 0.0;
    let mut sem_err = 0usize;
    let mut sem_tot = 0usize;
    for i in 0..50u64 {
        let scene = generate(&synth, &tax, 1_000_000 + i).unwrap();
        let label = infer(&out.model, &scene, &tax).unwrap();
        stats.add_scene(&label, &scene, &tax).unwrap();
        let pred = forward(&out.model, &scene).unwrap();
        let (_sem, clusters) = hard_labels(&pred);
        let m = SoftMatrix::from_hard_labels(&scene, &clusters, 16).unwrap();
        hard_imp += impurity_loss(&m).value;
        hard_frag += fragmentation_loss(&m).value;
        for (p, (&s, &g)) in label.sem().iter().zip(scene.sem_gt()).enumerate() {
            let _ = p;
            if g != 0 { sem_tot += 1; if s != g { sem_err += 1; } }
        }
    }
    let report = stats.report(&tax);
    println!("train time {:.1?}", train_time);
    println!("held-out RQ_th {:.4}  PQ {:.4}  mIoU {:.4}  sem_err {}/{}", report.rq_things, report.pq, report.miou, sem_err, sem_tot);
    println!("hard imp {:.5}  frag {:.5}  sum {:.5}", hard_imp / 50.0, hard_frag / 50.0, (hard_imp + hard_frag) / 50.0);
    for c in report.per_class.iter().filter(|c| c.present) {
        println!("  {:<12} pq {:.3} rq {:.3} iou {:.3} tp {} fp {} fn {}", c.name, c.pq, c.rq, c.iou, c.tp, c.fp, c.fn_count);
    }
}
