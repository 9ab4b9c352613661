use ctxdiff::data::{make_training_batch, ContextBatch, Direction, MapKind, TaskKind};
use ctxdiff::diffusion::TimestepWeighting;
use ctxdiff::diffusion::{forward_sample, predict_x0};
use ctxdiff::eval::{clip_eps, eval_batch, evaluate, sample_all, ConditionalDenoiser, EvalSpec, Metric, SamplerOptions, RESULTS_CSV_HEADER};
use ctxdiff::feedback::FeedbackConfig;
use ctxdiff::model::{DenoiserModel, ModelConfig};
use ctxdiff::optim::OptimConfig;
use ctxdiff::schedule::{select_steps, NoiseSchedule, StepPlan, Strategy};
use ctxdiff::train::{step_rng, StepLog, TrainConfig, Trainer, LOSS_CSV_HEADER};
use ctxdiff::{Result, Rng, Tensor};

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn ess() -> StepPlan {
    select_steps(&schedule(), 10, Strategy::Power(0.5)).unwrap()
}

fn micro_config(feedback: FeedbackConfig) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::micro(),
        schedule: schedule(),
        plan: ess(),
        weighting: TimestepWeighting::Uniform,
        feedback,
        optim: OptimConfig::default(),
        batch_size: 4,
        seed: 42,
    }
}

fn run(cfg: TrainConfig, steps: usize) -> (Vec<StepLog>, DenoiserModel<f32>) {
    let mut t = Trainer::new(cfg).unwrap();
    let logs = (0..steps).map(|_| t.step().unwrap()).collect();
    (logs, t.model)
}

#[test]
fn trainer_cycles_tasks_and_logs_losses() {
    let (logs, model) = run(micro_config(FeedbackConfig::default()), 8);
    assert_eq!(logs.len(), 8);
    for (i, log) in logs.iter().enumerate() {
        assert_eq!(log.step, i as u64);
        assert_eq!(log.task, TaskKind::training()[i % 6]);
        let fb = log.feedback_loss.unwrap();
        assert!(log.train_loss > 0.0 && fb >= 0.0);
        assert_eq!(log.total_loss, (log.train_loss as f32 + fb as f32) as f64);
    }
    let initial = DenoiserModel::<f32>::new(ModelConfig::micro(), &mut Rng::stream(42, ctxdiff::rng::streams::INIT)).unwrap();
    // Training moves the zero projections off zero.
    let id = initial.projection_ids()[0];
    assert!(model.params.value(id).data().iter().any(|&v| v != 0.0));
    assert_eq!(LOSS_CSV_HEADER.split(',').count(), logs[0].csv_row().split(',').count());
    assert!(logs[0].csv_row().starts_with("0,edge/image2map,"));
}

#[test]
fn zero_lambda_matches_disabled_feedback_bit_for_bit() {
    let zero = FeedbackConfig { lambda: 0.0, ..FeedbackConfig::default() };
    let (a_logs, a) = run(micro_config(zero), 7);
    let (b_logs, b) = run(micro_config(FeedbackConfig::disabled()), 7);
    assert_eq!(a_logs, b_logs);
    assert!(a_logs.iter().all(|l| l.feedback_loss.is_none()));
    for (x, y) in a.params.values().iter().zip(b.params.values()) {
        assert!(x.bit_eq(y));
    }
    let (c_logs, _) = run(micro_config(FeedbackConfig::default()), 7);
    assert_eq!(a_logs[0].train_loss, c_logs[0].train_loss);
    assert_ne!(a_logs[6].train_loss, c_logs[6].train_loss);
}

#[test]
fn training_is_deterministic_and_seed_dependent() {
    let (a, _) = run(micro_config(FeedbackConfig::default()), 4);
    let (b, _) = run(micro_config(FeedbackConfig::default()), 4);
    assert_eq!(a, b);
    let (c, _) = run(TrainConfig { seed: 43, ..micro_config(FeedbackConfig::default()) }, 4);
    assert_ne!(a, c);
}

#[test]
fn step_streams_are_distinct() {
    let draws: Vec<u64> = [(1, 0), (1, 1), (2, 0), (2, 1)].iter().map(|&(s, k)| step_rng(7, s, k).next_u64()).collect();
    for i in 0..draws.len() {
        for j in i + 1..draws.len() {
            assert_ne!(draws[i], draws[j]);
        }
    }
}

#[test]
fn held_out_kinds_never_reach_training() {
    for map in [MapKind::CannyLike, MapKind::ScribbleLike] {
        for d in [Direction::Image2Map, Direction::Map2Image] {
            assert!(make_training_batch::<f32>(TaskKind::new(map, d), 2, 0, 8).is_err());
        }
    }
}

#[test]
fn invalid_training_config_is_rejected() {
    let mut cfg = micro_config(FeedbackConfig::default());
    cfg.batch_size = 0;
    assert!(Trainer::new(cfg).is_err());
    let mut cfg = micro_config(FeedbackConfig::default());
    cfg.feedback.t_prime = 5000;
    assert!(Trainer::new(cfg).is_err());
}

/// Knows the clean target of every item and returns the exact noise.
struct Oracle(NoiseSchedule);

impl ConditionalDenoiser<f32> for Oracle {
    fn predict_eps(&self, x_t: &Tensor<f32>, t: usize, batch: &ContextBatch<f32>) -> Result<Tensor<f32>> {
        let ab = self.0.alpha_bar_at(t)?;
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x_t.zip_map(&batch.target, |x, x0| (x - a * x0) / b)
    }
}

fn spec(task: TaskKind, seed: u64) -> EvalSpec {
    EvalSpec { task, n: 50, seed, batch_size: 16, feature_seed: 0, image_size: 8, sampler: SamplerOptions::default() }
}

#[test]
fn oracle_evaluation_recovers_targets() {
    let task = TaskKind::new(MapKind::Edge, Direction::Image2Map);
    let report = evaluate(&Oracle(schedule()), "oracle", &spec(task, 1), &ess(), &schedule()).unwrap();
    match report.metric {
        Metric::Rmse(v) => assert!(v < 1e-3, "{v}"),
        Metric::Fd(_) => panic!("Image2Map reports rmse"),
    }
    let m2i = TaskKind::new(MapKind::Depth, Direction::Map2Image);
    let mut big = spec(m2i, 1);
    big.image_size = 16;
    let report = evaluate(&Oracle(schedule()), "oracle", &big, &ess(), &schedule()).unwrap();
    assert!(matches!(report.metric, Metric::Fd(v) if v < 1e-3), "{report}");
}

#[test]
fn evaluation_is_deterministic_and_stable_across_seeds() {
    let model = DenoiserModel::<f32>::new(ModelConfig::micro(), &mut Rng::new(3)).unwrap();
    let task = TaskKind::new(MapKind::Edge, Direction::Image2Map);
    let a = evaluate(&model, "init", &spec(task, 1), &ess(), &schedule()).unwrap();
    let b = evaluate(&model, "init", &spec(task, 1), &ess(), &schedule()).unwrap();
    assert_eq!(a, b);
    let c = evaluate(&model, "init", &spec(task, 2), &ess(), &schedule()).unwrap();
    let (va, vc) = (a.metric.value(), c.metric.value());
    assert!((va - vc).abs() < 0.1 * va.max(vc), "{va} vs {vc}");
    assert_eq!(a.plan_strategy, "power(0.5)");
    assert_eq!(a.k, 10);
    assert_eq!(a.csv_row(), format!("init,edge,image2map,rmse,{va},50,1,power(0.5),10"));
    assert_eq!(RESULTS_CSV_HEADER.split(',').count(), a.csv_row().split(',').count());
    assert!(evaluate(&model, "init", &EvalSpec { n: 49, ..spec(task, 1) }, &ess(), &schedule()).is_err());
}

#[test]
fn held_out_kinds_can_be_evaluated() {
    let model = DenoiserModel::<f32>::new(ModelConfig::micro(), &mut Rng::new(3)).unwrap();
    let task = TaskKind::new(MapKind::CannyLike, Direction::Image2Map);
    let r = evaluate(&model, "init", &spec(task, 4), &ess(), &schedule()).unwrap();
    assert!(r.metric.value().is_finite());
    assert!(r.csv_row().starts_with("init,canny_like,image2map,rmse,"));
}

#[test]
fn sampling_counts_one_call_per_plan_step() {
    let model = DenoiserModel::<f32>::new(ModelConfig::micro(), &mut Rng::new(3)).unwrap();
    let batch = eval_batch::<f32>(TaskKind::training()[3], 5, 0, 8).unwrap();
    for plan in [ess(), select_steps(&schedule(), 25, Strategy::Uniform).unwrap()] {
        let out = sample_all(&model, &batch, 2, &plan, &schedule(), &mut Rng::new(1), SamplerOptions::default()).unwrap();
        assert_eq!(out.denoiser_calls, plan.k());
        assert_eq!(out.x.shape(), &[5, 3, 8, 8]);
        assert!(out.x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn clipped_noise_implies_clamped_x0() {
    let s = schedule();
    let x0 = Tensor::from_vec(&[4], vec![-3.0f64, -0.5, 0.25, 2.0]).unwrap();
    let eps = Tensor::from_vec(&[4], vec![0.3f64, -1.2, 0.7, 0.1]).unwrap();
    for t in [10, 316, 1000] {
        let x_t = forward_sample(&x0, t, &eps, &s).unwrap();
        let clipped = clip_eps(&x_t, &eps, t, &s).unwrap();
        let back = predict_x0(&x_t, &clipped, t, &s).unwrap();
        let want = [-1.0, -0.5, 0.25, 1.0];
        for (b, w) in back.data().iter().zip(want) {
            assert!((b - w).abs() < 1e-9, "t={t}: {b} vs {w}");
        }
        // In-range coordinates keep their noise prediction.
        assert!((clipped.data()[1] - eps.data()[1]).abs() < 1e-9);
        assert!((clipped.data()[2] - eps.data()[2]).abs() < 1e-9);
    }
}
