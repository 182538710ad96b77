//! Training loop, closed-loop rollout evaluation and the ablation suite.
//!
//! One run is strictly sequential and deterministic: episodes are visited
//! in dataset order, gradients are averaged over the full batch and applied
//! once per epoch. The ablation suite fans out over (variant, seed) jobs,
//! each writing to its own subdirectory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{apply_variant, RunConfig, SuiteConfig, VariantKind};
use crate::env::render::{render_frame, Scene};
use crate::env::{arm::denormalize_angle, generate_episode, success_metric, EnvConfig};
use crate::env::dataset::load_dataset;
use crate::losses::LossBreakdown;
use crate::metrics::{
    append_timing, MetricsWriter, RolloutTrace, TimingRecord, TrainRecord,
};
use crate::model::{build_model, EpisodeData, Model};
use crate::tensor::{optim::Adam, Leaves, ParamSet, Tape};
use crate::{Error, Result};

/// Everything a finished (or aborted) training run leaves in memory.
pub struct TrainSummary {
    /// Per-epoch records, as written to `metrics.jsonl`.
    pub records: Vec<TrainRecord>,
    /// The trained model.
    pub model: Model,
    /// Final parameter values.
    pub params: ParamSet<f32>,
    /// Output directory of the run.
    pub out_dir: PathBuf,
}

/// Train one model per `run`, writing `metrics.jsonl`, `timing.jsonl` and
/// checkpoints into `run.out_dir`.
pub fn train_run(run: &RunConfig) -> Result<TrainSummary> {
    run.validate()?;
    let out_dir = PathBuf::from(&run.out_dir);
    let (manifest, episodes) = load_dataset(Path::new(&run.data_dir))?;
    if manifest.env != run.env {
        return Err(Error::Config(
            "run env config does not match the dataset's recorded env config".into(),
        ));
    }
    let data: Vec<EpisodeData<f32>> = episodes
        .iter()
        .map(|ep| EpisodeData::from_episode(ep, None))
        .collect();

    let (model, mut ps) = build_model::<f32>(&run.model)?;
    let mut opt = Adam::new(
        &ps,
        run.train.lr as f32,
        (run.train.grad_clip > 0.0).then_some(run.train.grad_clip as f32),
    );
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.jsonl"))?;
    // The run config is part of the run's artifacts: rollout and report
    // commands reconstruct the model and scene from it.
    std::fs::write(out_dir.join("run.json"), serde_json::to_vec_pretty(run)?)?;
    let mut records = Vec::new();

    for epoch in 1..=run.train.epochs {
        let started = Instant::now();
        let mut sum = LossBreakdown::default();
        let mut bounds_sides = (0.0, 0.0);
        let mut similarity = vec![0.0f64; run.model.n_td];
        for ep in &data {
            let tape = Tape::new();
            let lv = Leaves::new(&tape, &ps);
            let (loss, outcome) = model.episode_loss(&tape, &lv, ep)?;
            if !outcome.breakdown.total.is_finite() {
                let detail = format!("loss breakdown: {:?}", outcome.breakdown);
                let mut rec = diverged_record(epoch, &outcome.breakdown, &detail);
                rec.similarity = similarity.clone();
                writer.append(&rec)?;
                return Err(Error::Diverged { epoch, detail });
            }
            tape.backward(loss.total, &mut ps);
            sum.add_assign(&outcome.breakdown);
            bounds_sides.0 += outcome.bounds_sides.0;
            bounds_sides.1 += outcome.bounds_sides.1;
            for (acc, &s) in similarity.iter_mut().zip(outcome.similarity.iter()) {
                *acc += f64::from(s);
            }
        }
        let n = data.len() as f64;
        ps.scale_grads(1.0 / n as f32);
        opt.step(&mut ps);
        sum.scale(1.0 / n);
        bounds_sides = (bounds_sides.0 / n, bounds_sides.1 / n);
        for s in &mut similarity {
            *s /= n;
        }

        let checkpoint = if run.train.checkpoint_epochs.contains(&epoch)
            || epoch == run.train.epochs
        {
            let name = format!("ck_{epoch}.bin");
            save_checkpoint(&out_dir.join(&name), &run.model.hash(), epoch, &ps)?;
            Some(name)
        } else {
            None
        };

        let record = TrainRecord {
            epoch,
            loss: sum,
            bounds_sides,
            similarity,
            checkpoint,
            diverged: None,
        };
        if epoch % run.train.record_every == 0 || epoch == run.train.epochs {
            writer.append(&record)?;
            records.push(record);
        }
        append_timing(
            &out_dir,
            &TimingRecord {
                epoch,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            },
        )?;
    }

    Ok(TrainSummary {
        records,
        model,
        params: ps,
        out_dir,
    })
}

fn diverged_record(epoch: usize, loss: &LossBreakdown, detail: &str) -> TrainRecord {
    TrainRecord {
        epoch,
        loss: *loss,
        bounds_sides: (0.0, 0.0),
        similarity: Vec::new(),
        checkpoint: None,
        diverged: Some(detail.to_string()),
    }
}

/// How rollout inputs are fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Teacher frames and joints from the scripted episode.
    OpenLoop,
    /// The model's joint prediction becomes the next command; frames are
    /// rendered from the commanded pose.
    ClosedLoop,
}

impl RolloutMode {
    /// The token used in trace files and on the CLI.
    pub fn token(self) -> &'static str {
        match self {
            RolloutMode::OpenLoop => "open_loop",
            RolloutMode::ClosedLoop => "closed_loop",
        }
    }
}

/// Run one evaluation episode and record attention traces. `seed` selects
/// the scripted episode (start jitter) the rollout is initialized from.
///
/// On a non-finite prediction the rollout stops early: the trace keeps the
/// steps recorded so far, `aborted_at` is set and both success flags are
/// false.
pub fn rollout(
    model: &Model,
    ps: &ParamSet<f32>,
    env: &EnvConfig,
    slot: usize,
    seed: u64,
    mode: RolloutMode,
) -> Result<RolloutTrace> {
    let episode = generate_episode(env, slot, seed)?;
    let t_len = env.steps;
    let grasp = env.grasp_step();
    let scale = 1.0 / 255.0f32;

    let mut state = model.init_state::<f32>();
    let mut joints_cur: Array1<f32> = episode.joints.row(0).to_owned();
    let mut grasped = false;
    let mut trace = RolloutTrace {
        slot,
        mode: mode.token().to_string(),
        pt_td: Vec::with_capacity(t_len),
        pt_bu: Vec::with_capacity(t_len),
        m_bu_sum: Vec::with_capacity(t_len),
        joints: Vec::with_capacity(t_len),
        attention_success: false,
        pick_success: false,
        aborted_at: None,
    };
    let mut joint_rows: Vec<Array1<f32>> = Vec::with_capacity(t_len);

    for t in 0..t_len {
        let (frame, joints): (Array3<f32>, Array1<f32>) = match mode {
            RolloutMode::OpenLoop => (
                episode
                    .frames
                    .index_axis(Axis(0), t)
                    .mapv(|v| f32::from(v) * scale),
                episode.joints.row(t).to_owned(),
            ),
            RolloutMode::ClosedLoop => {
                // The box follows the gripper once a grasp actually
                // happened; otherwise it stays on its slot.
                if t == grasp {
                    let ee = crate::env::end_effector(env, joints_cur.as_slice().unwrap());
                    let dx = ee[0] - episode.box_center_px[0];
                    let dy = ee[1] - episode.box_center_px[1];
                    grasped = (dx * dx + dy * dy).sqrt() <= env.ee_tolerance_px
                        && f64::from(joints_cur[3]) <= 0.5;
                }
                let ee = crate::env::end_effector(env, joints_cur.as_slice().unwrap());
                let scene = Scene {
                    angles: [
                        denormalize_angle(f64::from(joints_cur[0])),
                        denormalize_angle(f64::from(joints_cur[1])),
                        denormalize_angle(f64::from(joints_cur[2])),
                    ],
                    gripper: f64::from(joints_cur[3]),
                    box_center: if grasped && t >= grasp {
                        ee
                    } else {
                        episode.box_center_px
                    },
                    box_size: env.box_size,
                    draw_arm: true,
                };
                (
                    render_frame(&env.arm, &scene, env.image).mapv(|v| f32::from(v) * scale),
                    joints_cur.clone(),
                )
            }
        };

        let (out, next_state) = model.infer_step(ps, &frame, &joints, &state)?;
        let finite = out.joint_hat.iter().all(|v| v.is_finite())
            && out.pt_td.iter().all(|v| v.is_finite());
        if !finite {
            trace.aborted_at = Some(t);
            return Ok(trace);
        }
        state = next_state;

        trace
            .pt_td
            .push((0..out.pt_td.nrows())
                .map(|k| [f64::from(out.pt_td[[k, 0]]), f64::from(out.pt_td[[k, 1]])])
                .collect());
        trace
            .pt_bu
            .push((0..out.pt_bu.nrows())
                .map(|k| [f64::from(out.pt_bu[[k, 0]]), f64::from(out.pt_bu[[k, 1]])])
                .collect());
        trace
            .m_bu_sum
            .push(out.m_bu_sum.outer_iter().map(|row| row.to_vec()).collect());
        trace
            .joints
            .push(joints.iter().map(|&v| f64::from(v)).collect());
        joint_rows.push(joints.clone());

        if mode == RolloutMode::ClosedLoop {
            joints_cur = out.joint_hat;
        }
    }

    // Score the trajectory that was actually followed.
    let joints_mat = Array2::from_shape_fn((t_len, joint_rows[0].len()), |(t, j)| {
        joint_rows[t][j]
    });
    let pt_td = Array3::from_shape_fn(
        (t_len, trace.pt_td[0].len(), 2),
        |(t, k, c)| trace.pt_td[t][k][c],
    );
    let flags = success_metric(env, &joints_mat, episode.box_center_px, &pt_td);
    trace.attention_success = flags.attention_success;
    trace.pick_success = flags.pick_success;
    Ok(trace)
}

/// Outcome of one (variant, seed) training job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    /// Model seed of the job.
    pub seed: u64,
    /// Closed-loop attention success per slot.
    pub attention: Vec<bool>,
    /// Closed-loop pick success per slot.
    pub pick: Vec<bool>,
    /// Final per-head query similarity.
    pub similarity_final: Vec<f64>,
    /// Peak (over epochs) of the head-mean query similarity.
    pub similarity_peak_mean: f64,
    /// Head-mean query similarity at the final epoch.
    pub similarity_final_mean: f64,
    /// Set when the job failed; success fields are all false then.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Aggregated results for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    /// Which variant.
    pub kind: VariantKind,
    /// Display name (results-table column header).
    pub name: String,
    /// Per-seed outcomes.
    pub seeds: Vec<SeedOutcome>,
}

impl VariantResult {
    /// (successes, trials) over all seeds and slots for attention success.
    pub fn attention_counts(&self) -> (usize, usize) {
        count(&self.seeds, |s| &s.attention)
    }

    /// (successes, trials) over all seeds and slots for pick success.
    pub fn pick_counts(&self) -> (usize, usize) {
        count(&self.seeds, |s| &s.pick)
    }
}

fn count(seeds: &[SeedOutcome], f: impl Fn(&SeedOutcome) -> &Vec<bool>) -> (usize, usize) {
    let mut ok = 0;
    let mut total = 0;
    for s in seeds {
        ok += f(s).iter().filter(|&&b| b).count();
        total += f(s).len();
    }
    (ok, total)
}

/// Full ablation-suite results, saved as `results.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResults {
    /// Seeds every variant was trained on.
    pub seeds: Vec<u64>,
    /// Number of slots evaluated per seed.
    pub slots: usize,
    /// One entry per variant, in results-table column order.
    pub variants: Vec<VariantResult>,
}

impl AblationResults {
    /// Save as pretty JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Load from JSON.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Train every (variant, seed) job of the suite and evaluate each with one
/// closed-loop rollout per slot. Job failures are recorded in the results
/// and do not stop the suite. Writes `results.json` under the suite's
/// output directory and returns the results.
pub fn run_ablation(suite: &SuiteConfig) -> Result<AblationResults> {
    suite.validate()?;
    let base_out = PathBuf::from(&suite.base.out_dir);
    let jobs: Vec<(VariantKind, u64)> = suite
        .variants
        .iter()
        .flat_map(|&v| suite.seeds.iter().map(move |&s| (v, s)))
        .collect();

    let outcomes: Vec<(VariantKind, SeedOutcome)> = jobs
        .par_iter()
        .map(|&(kind, seed)| (kind, run_job(suite, kind, seed)))
        .collect();

    let mut variants = Vec::new();
    for &kind in &suite.variants {
        variants.push(VariantResult {
            kind,
            name: kind.name().to_string(),
            seeds: outcomes
                .iter()
                .filter(|(k, _)| *k == kind)
                .map(|(_, s)| s.clone())
                .collect(),
        });
    }
    let results = AblationResults {
        seeds: suite.seeds.clone(),
        slots: 3,
        variants,
    };
    results.save(&base_out.join("results.json"))?;
    Ok(results)
}

fn run_job(suite: &SuiteConfig, kind: VariantKind, seed: u64) -> SeedOutcome {
    let failed = |msg: String| SeedOutcome {
        seed,
        attention: vec![false; 3],
        pick: vec![false; 3],
        similarity_final: Vec::new(),
        similarity_peak_mean: 0.0,
        similarity_final_mean: 0.0,
        error: Some(msg),
    };
    let mut model_cfg = apply_variant(&suite.base.model, kind);
    model_cfg.seed = seed;
    let run = RunConfig {
        model: model_cfg,
        train: suite.base.train.clone(),
        env: suite.base.env.clone(),
        data_dir: suite.base.data_dir.clone(),
        out_dir: PathBuf::from(&suite.base.out_dir)
            .join(format!("{}_s{seed}", kind.token()))
            .to_string_lossy()
            .into_owned(),
    };
    let summary = match train_run(&run) {
        Ok(s) => s,
        Err(e) => return failed(format!("training failed: {e}")),
    };

    let mut attention = Vec::with_capacity(3);
    let mut pick = Vec::with_capacity(3);
    for slot in 0..3 {
        let trace = match rollout(
            &summary.model,
            &summary.params,
            &run.env,
            slot,
            seed,
            RolloutMode::ClosedLoop,
        ) {
            Ok(t) => t,
            Err(e) => return failed(format!("rollout on slot {slot} failed: {e}")),
        };
        trace
            .save(&summary.out_dir.join(format!("trace_slot{slot}.json")))
            .ok();
        attention.push(trace.attention_success);
        pick.push(trace.pick_success);
    }

    let head_mean = |r: &TrainRecord| {
        r.similarity.iter().sum::<f64>() / r.similarity.len().max(1) as f64
    };
    let final_rec = summary.records.last().expect("training emitted records");
    SeedOutcome {
        seed,
        attention,
        pick,
        similarity_final: final_rec.similarity.clone(),
        similarity_peak_mean: summary.records.iter().map(head_mean).fold(f64::MIN, f64::max),
        similarity_final_mean: head_mean(final_rec),
        error: None,
    }
}
