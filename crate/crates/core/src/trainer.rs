//! Progressive training: stage schedule, reference-FID triggered growth, the
//! adversarial optimization step, checkpointing and the outer loop.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::config::Config;
use crate::data::{self, Batch, Dataset};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::evaluation::{self, FidEvaluator};
use crate::generator::Generator;
use crate::moe;
use crate::nn::{self, ParamStore};
use crate::objectives::{self, ClipProxy, LossReport};
use crate::optim::{self, AdamParams, AdamW};

/// Seed of the frozen FID embedder; fixed so values are comparable across runs.
pub const FID_EXTRACTOR_SEED: u64 = 0xF1D;
/// Real images used to fit each contrastive alignment head.
pub const CLIP_FIT_SAMPLES: usize = 512;
/// Consecutive rejected steps tolerated by the loop before giving up.
pub const MAX_CONSECUTIVE_REJECTIONS: u32 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub resolutions: Vec<usize>,
    pub stage: usize,
    pub steps_in_stage: u64,
    /// Per-stage step caps; one entry applies to all stages.
    pub caps: Vec<u64>,
}

impl StageSchedule {
    pub fn new(resolutions: Vec<usize>, caps: Vec<u64>) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Config("empty resolution schedule".into()));
        }
        Ok(Self {
            resolutions,
            stage: 0,
            steps_in_stage: 0,
            caps,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolutions[self.stage]
    }

    pub fn active_stages(&self) -> usize {
        self.stage + 1
    }

    pub fn is_final(&self) -> bool {
        self.stage + 1 == self.resolutions.len()
    }

    pub fn cap(&self) -> u64 {
        match self.caps.as_slice() {
            [] => u64::MAX,
            [single] => *single,
            caps => caps.get(self.stage).copied().unwrap_or(*caps.last().unwrap()),
        }
    }

    pub fn at_cap(&self) -> bool {
        self.steps_in_stage >= self.cap()
    }

    /// Moves to the next resolution.
    pub fn advance(&mut self) -> Result<()> {
        if self.is_final() {
            return Err(Error::Stage(format!(
                "already at the final resolution {}",
                self.resolution()
            )));
        }
        self.stage += 1;
        self.steps_in_stage = 0;
        Ok(())
    }
}

/// Reference FID per resolution for one `(n, seed)` setting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFidTable {
    pub n: usize,
    pub seed: u64,
    pub values: BTreeMap<usize, f64>,
}

impl ReferenceFidTable {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            values: BTreeMap::new(),
        }
    }

    pub fn get(&self, resolution: usize) -> Result<f64> {
        self.values
            .get(&resolution)
            .copied()
            .ok_or_else(|| Error::Stage(format!("no reference FID for resolution {resolution}")))
    }
}

/// FID between two disjoint random halves of `2n` real images.
pub fn reference_fid(evaluator: &FidEvaluator, dataset: &Dataset, resolution: usize, n: usize, seed: u64) -> Result<f64> {
    if n == 0 || dataset.len() < 2 * n {
        return Err(Error::InsufficientData {
            required: 2 * n,
            available: dataset.len(),
        });
    }
    let mut rng = nn::labeled_rng(seed, "reference");
    let idx = rand::seq::index::sample(&mut rng, dataset.len(), 2 * n).into_vec();
    let a = evaluator.dataset_stats(dataset, &idx[..n], resolution)?;
    let b = evaluator.dataset_stats(dataset, &idx[n..], resolution)?;
    evaluation::frechet_distance(&a, &b)
}

/// Memoized [`reference_fid`] keyed by `(dataset hash, resolution, n, seed)`.
#[derive(Debug, Default)]
pub struct ReferenceFidCache {
    values: HashMap<(String, usize, usize, u64), f64>,
    pub hits: u64,
    pub computations: u64,
}

impl ReferenceFidCache {
    pub fn get_or_compute(
        &mut self,
        evaluator: &FidEvaluator,
        dataset: &Dataset,
        resolution: usize,
        n: usize,
        seed: u64,
    ) -> Result<f64> {
        let key = (dataset.hash(), resolution, n, seed);
        if let Some(&v) = self.values.get(&key) {
            self.hits += 1;
            return Ok(v);
        }
        let v = reference_fid(evaluator, dataset, resolution, n, seed)?;
        self.computations += 1;
        self.values.insert(key, v);
        Ok(v)
    }
}

/// Growth trigger: `current ≤ τ · reference` or the stage cap is reached;
/// never at the final resolution.
pub fn should_advance(
    current_fid: f64,
    table: &ReferenceFidTable,
    resolution: usize,
    schedule: &StageSchedule,
    tau: f64,
) -> Result<bool> {
    let reference = table.get(resolution)?;
    if schedule.is_final() {
        return Ok(false);
    }
    Ok(current_fid <= tau * reference || schedule.at_cap())
}

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub schedule: StageSchedule,
    pub g_store: ParamStore,
    pub d_store: ParamStore,
    pub ema_store: ParamStore,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub rng: ChaCha8Rng,
    pub reference: ReferenceFidTable,
}

/// Serializable scalar part of [`TrainState`], stored as checkpoint metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    rng: ChaCha8Rng,
    reference: ReferenceFidTable,
    opt_g_steps: BTreeMap<String, u64>,
    opt_d_steps: BTreeMap<String, u64>,
    g_seed: u64,
    d_seed: u64,
}

/// Tensors computed by the generator objective.
struct GeneratorLoss {
    total: Tensor,
    g_adv: f64,
    clip_multi: f64,
    moe: f64,
}

/// Events reported by [`Trainer::train_loop`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LoopEvent {
    Eval {
        step: u64,
        resolution: usize,
        fid: f64,
        reference: f64,
    },
    Grow {
        step: u64,
        from: usize,
        to: usize,
    },
    Rejected {
        step: u64,
        reason: String,
    },
    Finished {
        step: u64,
        resolution: usize,
        reason: String,
    },
}

pub type FidHook<'a> = Box<dyn FnMut(&Trainer) -> Result<f64> + 'a>;
pub type ReferenceHook<'a> = Box<dyn FnMut(usize) -> Result<f64> + 'a>;
pub type EvalHook<'a> = Box<dyn FnMut(&Trainer, f64) -> bool + 'a>;

/// Optional overrides for the outer loop.
#[derive(Default)]
pub struct LoopHooks<'a> {
    /// Replaces the FID evaluation of the current generator.
    pub fid: Option<FidHook<'a>>,
    /// Replaces the reference-FID computation.
    pub reference: Option<ReferenceHook<'a>>,
    /// Called after each evaluation; returning `true` stops training.
    pub on_eval: Option<EvalHook<'a>>,
    /// Stop (as if interrupted) once the global step reaches this value.
    pub stop_at_step: Option<u64>,
}

pub struct Trainer {
    cfg: Config,
    dataset: Arc<Dataset>,
    evaluator: Arc<FidEvaluator>,
    pub state: TrainState,
    g: Generator,
    d: Discriminator,
    d_frozen: Discriminator,
    ema_g: Generator,
    clip: ClipProxy,
    reference_cache: ReferenceFidCache,
    write_files: bool,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.state.step)
            .field("resolution", &self.state.schedule.resolution())
            .finish()
    }
}

fn d_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_D15C
}

impl Trainer {
    /// Fresh trainer at the first stage.
    pub fn new(cfg: Config, dataset: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        let schedule = StageSchedule::new(cfg.model.resolutions.clone(), cfg.train.max_steps_per_stage.clone())?;
        let mut g_store = ParamStore::new(cfg.seed);
        let mut d_store = ParamStore::new(d_seed(cfg.seed));
        Generator::new(&mut g_store, &cfg.model, 1)?;
        Discriminator::new(&mut d_store, &cfg.model, 1)?;
        let mut ema_store = ParamStore::new(cfg.seed);
        optim::ema_update(&mut ema_store, &g_store, 0.0)?;
        let params = AdamParams::from(&cfg.optim);
        let state = TrainState {
            step: 0,
            schedule,
            g_store,
            d_store,
            ema_store,
            opt_g: AdamW::new(params),
            opt_d: AdamW::new(params),
            rng: nn::labeled_rng(cfg.seed, "train"),
            reference: ReferenceFidTable::new(cfg.train.reference_n, cfg.train.reference_seed),
        };
        let mut t = Self::assemble(cfg, dataset, state, None)?;
        t.fit_clip_level(t.resolution())?;
        Ok(t)
    }

    fn assemble(cfg: Config, dataset: Arc<Dataset>, mut state: TrainState, clip: Option<ClipProxy>) -> Result<Self> {
        let active = state.schedule.active_stages();
        let g = Generator::new(&mut state.g_store, &cfg.model, active)?;
        let d = Discriminator::new(&mut state.d_store, &cfg.model, active)?;
        let d_frozen = Discriminator::new_detached(&mut state.d_store, &cfg.model, active)?;
        optim::ema_update(&mut state.ema_store, &state.g_store, 1.0)?;
        let ema_g = Generator::new_detached(&mut state.ema_store, &cfg.model, active)?;
        let clip = match clip {
            Some(c) => c,
            None => ClipProxy::new(
                cfg.seed,
                &cfg.model.resolutions,
                cfg.model.extractor_width,
                cfg.model.text_dim,
                cfg.loss.clip_temperature,
            )?,
        };
        Ok(Self {
            evaluator: Arc::new(FidEvaluator::new(FID_EXTRACTOR_SEED, cfg.model.extractor_width)),
            cfg,
            dataset,
            state,
            g,
            d,
            d_frozen,
            ema_g,
            clip,
            reference_cache: ReferenceFidCache::default(),
            write_files: true,
        })
    }

    /// Disables log, CSV and checkpoint output.
    pub fn without_files(mut self) -> Self {
        self.write_files = false;
        self
    }

    /// Shares an evaluator (and its real-statistics cache) across trainers.
    pub fn with_evaluator(mut self, evaluator: Arc<FidEvaluator>) -> Self {
        self.evaluator = evaluator;
        self
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn evaluator(&self) -> &Arc<FidEvaluator> {
        &self.evaluator
    }

    pub fn resolution(&self) -> usize {
        self.state.schedule.resolution()
    }

    pub fn generator(&self) -> &Generator {
        &self.g
    }

    pub fn ema_generator(&self) -> &Generator {
        &self.ema_g
    }

    /// Generator used for evaluation (EMA unless disabled in config).
    pub fn eval_generator(&self) -> &Generator {
        if self.cfg.optim.eval_with_ema {
            &self.ema_g
        } else {
            &self.g
        }
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.d
    }

    pub fn clip(&self) -> &ClipProxy {
        &self.clip
    }

    pub fn reference_cache(&self) -> &ReferenceFidCache {
        &self.reference_cache
    }

    fn fit_clip_level(&mut self, resolution: usize) -> Result<()> {
        if !self.cfg.loss.clip_fit_alignment {
            return Ok(());
        }
        let mut rng = nn::labeled_rng(self.cfg.seed, &format!("clip.fit.{resolution}"));
        let n = CLIP_FIT_SAMPLES.min(self.dataset.len());
        let idx = rand::seq::index::sample(&mut rng, self.dataset.len(), n).into_vec();
        let batch = self.dataset.batch(&idx, resolution)?;
        let tokens = self.g.encoder().encode(&batch.captions)?;
        self.clip
            .fit(resolution, &batch.images, &tokens.global, self.cfg.loss.clip_ridge)
    }

    /// Adds the next stage to both networks; new paths start at zero so the
    /// current outputs are unchanged.
    pub fn grow(&mut self) -> Result<()> {
        self.state.schedule.advance()?;
        let cfg = self.cfg.clone();
        let active = self.state.schedule.active_stages();
        self.g = Generator::new(&mut self.state.g_store, &cfg.model, active)?;
        self.d = Discriminator::new(&mut self.state.d_store, &cfg.model, active)?;
        self.d_frozen = Discriminator::new_detached(&mut self.state.d_store, &cfg.model, active)?;
        optim::ema_update(&mut self.state.ema_store, &self.state.g_store, 1.0)?;
        self.ema_g = Generator::new_detached(&mut self.state.ema_store, &cfg.model, active)?;
        if !self.clip.is_fitted(self.resolution()) {
            self.fit_clip_level(self.resolution())?;
        }
        Ok(())
    }

    /// Draws a training batch at the current resolution from the state RNG.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let res = self.resolution();
        let size = self.cfg.train.batch_size;
        self.dataset.sample_batch(&mut self.state.rng, size, res)
    }

    fn generator_loss(&mut self, batch: &Batch) -> Result<GeneratorLoss> {
        let b = batch.len();
        let z = nn::randn(&mut self.state.rng, &[b, self.cfg.model.z_dim], 1.0)?;
        let raw = self.g.encoder().encode(&batch.captions)?;
        let tokens = self.g.text_tokens(&batch.captions)?;
        let w = self.g.style(&z, &tokens)?;
        let out = self.g.synthesize_from(&w, &tokens, self.resolution())?;
        let fake_scores = self.d_frozen.score(out.image(), &raw)?;
        let g_adv = objectives::g_adversarial(&fake_scores)?;
        let clip = self.clip.multi_level_loss(&out.pyramid, &raw.global)?;
        let mut moe_total = Tensor::new(0f32, &nn::device())?;
        for layer in &out.routing {
            moe_total = (moe_total + moe::load_balance_loss(&layer.decision.stats()?, self.cfg.loss.moe_alpha)?)?;
        }
        let total = ((&g_adv + (&clip * self.cfg.loss.lambda_clip)?)? + &moe_total)?;
        Ok(GeneratorLoss {
            total,
            g_adv: nn::scalar(&g_adv)?,
            clip_multi: nn::scalar(&clip)?,
            moe: nn::scalar(&moe_total)?,
        })
    }

    /// Gradients of the generator objective on `batch` for every generator
    /// parameter (zeros where autograd produced none), without updating.
    pub fn generator_gradients(&mut self, batch: &Batch) -> Result<BTreeMap<String, Tensor>> {
        let loss = self.generator_loss(batch)?;
        let grads = loss.total.backward()?;
        let mut out = BTreeMap::new();
        for (name, var) in self.state.g_store.iter() {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// One discriminator update followed by one generator update. A
    /// non-finite batch or loss rejects the step and restores the state.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        if batch.resolution() != self.resolution() {
            return Err(Error::Shape(format!(
                "batch resolution {} does not match stage resolution {}",
                batch.resolution(),
                self.resolution()
            )));
        }
        if !nn::all_finite(&batch.images)? {
            return Err(Error::NonFinite("batch contains non-finite pixels; step rejected".into()));
        }
        let g_snap = self.state.g_store.snapshot()?;
        let d_snap = self.state.d_store.snapshot()?;
        let ema_snap = self.state.ema_store.snapshot()?;
        let opt_snap = (self.state.opt_g.clone(), self.state.opt_d.clone(), self.state.rng.clone());
        match self.try_step(batch) {
            Ok(report) => Ok(report),
            Err(e) => {
                self.state.g_store.restore(&g_snap)?;
                self.state.d_store.restore(&d_snap)?;
                self.state.ema_store.restore(&ema_snap)?;
                (self.state.opt_g, self.state.opt_d, self.state.rng) = opt_snap;
                Err(e)
            }
        }
    }

    fn try_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let lc = self.cfg.loss.clone();
        let b = batch.len();
        let raw = self.g.encoder().encode(&batch.captions)?;

        // Discriminator update.
        let z = nn::randn(&mut self.state.rng, &[b, self.cfg.model.z_dim], 1.0)?;
        let fake = self.g.synthesize(&z, &batch.captions)?.image().detach();
        let real_scores = self.d.score(&batch.images, &raw)?;
        let fake_scores = self.d.score(&fake, &raw)?;
        let d_adv = objectives::d_adversarial(&real_scores, &fake_scores)?;
        let mismatched = if b >= 2 {
            let perm = data::mismatch_shuffle(b, &mut self.state.rng)?;
            Some(self.d.score(&batch.images, &raw.select(&perm)?)?)
        } else {
            None
        };
        let matching = objectives::matching_aware(mismatched.as_ref())?;
        let r1_applied = lc.r1_interval > 0 && lc.r1_gamma > 0.0 && self.state.step % lc.r1_interval == 0;
        let r1 = if r1_applied {
            (objectives::r1_penalty(&self.d, &batch.images, &raw, lc.r1_gamma)? * lc.r1_interval as f64)?
        } else {
            Tensor::new(0f32, &nn::device())?
        };
        let total_d = ((&d_adv + (&matching.loss * lc.lambda_match)?)? + &r1)?;
        let d_parts = [nn::scalar(&d_adv)?, nn::scalar(&matching.loss)?, nn::scalar(&r1)?];
        if !d_parts.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("discriminator loss not finite: {d_parts:?}")));
        }
        let grads = total_d.backward()?;
        self.state.opt_d.step(&self.state.d_store, &grads)?;

        // Generator update.
        let gl = self.generator_loss(batch)?;
        if ![gl.g_adv, gl.clip_multi, gl.moe].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "generator loss not finite: g_adv {} clip {} moe {}",
                gl.g_adv, gl.clip_multi, gl.moe
            )));
        }
        let grads = gl.total.backward()?;
        self.state.opt_g.step(&self.state.g_store, &grads)?;
        let beta = optim::ema_beta(self.cfg.optim.ema_decay, self.state.step, self.cfg.optim.ema_rampup);
        optim::ema_update(&mut self.state.ema_store, &self.state.g_store, beta)?;

        self.state.step += 1;
        self.state.schedule.steps_in_stage += 1;
        let parts = LossReport {
            g_adv: gl.g_adv,
            d_adv: d_parts[0],
            r1: d_parts[2],
            match_loss: d_parts[1],
            clip_multi: gl.clip_multi,
            moe: gl.moe,
            r1_applied,
            match_skipped: matching.skipped,
            ..LossReport::default()
        };
        Ok(objectives::total_losses(&parts, &lc))
    }

    /// FID of the evaluation generator against real data at the current stage.
    pub fn current_fid(&self) -> Result<f64> {
        self.evaluator.fid_score(
            self.eval_generator(),
            &self.dataset,
            self.cfg.train.fid_n,
            self.cfg.train.reference_seed,
        )
    }

    fn reference_for(&mut self, resolution: usize, hook: &mut Option<ReferenceHook<'_>>) -> Result<f64> {
        if let Some(&v) = self.state.reference.values.get(&resolution) {
            return Ok(v);
        }
        let v = match hook {
            Some(h) => h(resolution)?,
            None => self.reference_cache.get_or_compute(
                &self.evaluator,
                &self.dataset,
                resolution,
                self.state.reference.n,
                self.state.reference.seed,
            )?,
        };
        self.state.reference.values.insert(resolution, v);
        Ok(v)
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cfg.train.out_dir.join(name)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_path("checkpoint.safetensors")
    }

    fn log_line(&self, line: &str) -> Result<()> {
        if !self.write_files {
            return Ok(());
        }
        std::fs::create_dir_all(&self.cfg.train.out_dir)?;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.out_path("train_log.jsonl"))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    /// Runs until the final stage finishes (cap or trigger), a hook stops it,
    /// or an error surfaces.
    pub fn train_loop(&mut self, mut hooks: LoopHooks<'_>) -> Result<Vec<LoopEvent>> {
        let mut events = Vec::new();
        let mut rejections = 0u32;
        let finish = |s: &Self, reason: &str| LoopEvent::Finished {
            step: s.state.step,
            resolution: s.resolution(),
            reason: reason.to_string(),
        };
        loop {
            if hooks.stop_at_step.is_some_and(|s| self.state.step >= s) {
                events.push(finish(self, "interrupted"));
                break;
            }
            if self.state.schedule.at_cap() {
                if self.state.schedule.is_final() {
                    events.push(finish(self, "cap"));
                    break;
                }
                events.push(self.grow_event()?);
                continue;
            }
            let batch = self.next_batch()?;
            match self.train_step(&batch) {
                Ok(report) => {
                    rejections = 0;
                    let mut line = serde_json::to_value(&report)?;
                    line["step"] = self.state.step.into();
                    line["resolution"] = self.resolution().into();
                    self.log_line(&line.to_string())?;
                }
                Err(Error::NonFinite(reason)) => {
                    log::warn!("step {} rejected: {reason}", self.state.step);
                    events.push(LoopEvent::Rejected {
                        step: self.state.step,
                        reason,
                    });
                    rejections += 1;
                    if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                        return Err(Error::NonFinite(format!("{rejections} consecutive steps rejected")));
                    }
                    continue;
                }
                Err(e) => return Err(e),
            }
            let step = self.state.step;
            if self.write_files && self.cfg.train.checkpoint_every > 0 && step % self.cfg.train.checkpoint_every == 0 {
                self.save(&self.checkpoint_path())?;
            }
            if self.cfg.train.eval_every > 0 && step % self.cfg.train.eval_every == 0 {
                let res = self.resolution();
                let fid = match hooks.fid.as_mut() {
                    Some(h) => h(self)?,
                    None => self.current_fid()?,
                };
                let reference = self.reference_for(res, &mut hooks.reference)?;
                log::info!("step {step} resolution {res}: fid {fid:.4} (reference {reference:.4})");
                if self.write_files {
                    std::fs::create_dir_all(&self.cfg.train.out_dir)?;
                    evaluation::append_fid_csv(&self.out_path("fid.csv"), step, res, self.cfg.train.fid_n, self.cfg.train.reference_seed, fid)?;
                }
                events.push(LoopEvent::Eval {
                    step,
                    resolution: res,
                    fid,
                    reference,
                });
                if let Some(h) = hooks.on_eval.as_mut() {
                    if h(self, fid) {
                        events.push(finish(self, "stopped"));
                        break;
                    }
                }
                if self.state.schedule.is_final() {
                    if fid <= self.cfg.train.tau * reference {
                        events.push(finish(self, "reference reached"));
                        break;
                    }
                } else if should_advance(fid, &self.state.reference, res, &self.state.schedule, self.cfg.train.tau)? {
                    events.push(self.grow_event()?);
                }
            }
        }
        if self.write_files {
            self.save(&self.checkpoint_path())?;
        }
        Ok(events)
    }

    fn grow_event(&mut self) -> Result<LoopEvent> {
        let from = self.resolution();
        self.grow()?;
        log::info!("grew from {from} to {}", self.resolution());
        Ok(LoopEvent::Grow {
            step: self.state.step,
            from,
            to: self.resolution(),
        })
    }

    /// Full archive: parameters, EMA, optimizer moments, contrastive heads,
    /// schedule, configuration and RNG state.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::default();
        a.insert_namespace("generator", &self.state.g_store.snapshot()?);
        a.insert_namespace("discriminator", &self.state.d_store.snapshot()?);
        a.insert_namespace("ema", &self.state.ema_store.snapshot()?);
        a.insert_namespace("opt", &self.state.opt_g.tensors("g"));
        a.insert_namespace("opt", &self.state.opt_d.tensors("d"));
        a.insert_namespace("aux", &self.clip.head_tensors()?);
        a.metadata.insert("config".into(), self.cfg.to_toml_string()?);
        a.metadata.insert("config_hash".into(), self.cfg.hash());
        a.metadata.insert("schedule".into(), serde_json::to_string(&self.state.schedule)?);
        let meta = StateMeta {
            step: self.state.step,
            rng: self.state.rng.clone(),
            reference: self.state.reference.clone(),
            opt_g_steps: self.state.opt_g.step_counts(),
            opt_d_steps: self.state.opt_d.step_counts(),
            g_seed: self.state.g_store.seed(),
            d_seed: self.state.d_store.seed(),
        };
        a.metadata.insert("train_state".into(), serde_json::to_string(&meta)?);
        a.metadata.insert("dataset_hash".into(), self.dataset.hash());
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn from_archive(archive: &Archive, dataset: Arc<Dataset>) -> Result<Self> {
        let cfg = Config::from_toml_str(archive.meta("config")?)?;
        let schedule: StageSchedule = serde_json::from_str(archive.meta("schedule")?)?;
        let meta: StateMeta = serde_json::from_str(archive.meta("train_state")?)?;
        let store_from = |ns: &str, seed: u64| -> Result<ParamStore> {
            let mut s = ParamStore::new(seed);
            for (k, v) in archive.namespace(ns) {
                s.insert(&k, &v)?;
            }
            Ok(s)
        };
        let mut g_store = store_from("generator", meta.g_seed)?;
        let mut ema_store = store_from("ema", meta.g_seed)?;
        let d_store = store_from("discriminator", meta.d_seed)?;
        // Building the networks marks the frozen encoder parameters.
        Generator::new(&mut g_store, &cfg.model, schedule.active_stages())?;
        Generator::new_detached(&mut ema_store, &cfg.model, schedule.active_stages())?;
        let params = AdamParams::from(&cfg.optim);
        let opt = archive.namespace("opt");
        let state = TrainState {
            step: meta.step,
            schedule,
            g_store,
            d_store,
            ema_store,
            opt_g: AdamW::restore(params, "g", &opt, &meta.opt_g_steps)?,
            opt_d: AdamW::restore(params, "d", &opt, &meta.opt_d_steps)?,
            rng: meta.rng,
            reference: meta.reference,
        };
        let mut clip = ClipProxy::new(
            cfg.seed,
            &cfg.model.resolutions,
            cfg.model.extractor_width,
            cfg.model.text_dim,
            cfg.loss.clip_temperature,
        )?;
        clip.load_heads(&archive.namespace("aux"))?;
        Self::assemble(cfg, dataset, state, Some(clip))
    }

    pub fn load(path: &Path, dataset: Arc<Dataset>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, dataset)
    }
}

/// Generator (EMA weights) and configuration restored from a checkpoint,
/// for sampling without a dataset.
pub fn load_generator(path: &Path) -> Result<(Config, Generator)> {
    let archive = Archive::load(path)?;
    let cfg = Config::from_toml_str(archive.meta("config")?)?;
    let schedule: StageSchedule = serde_json::from_str(archive.meta("schedule")?)?;
    let mut store = ParamStore::new(cfg.seed);
    let ns = if cfg.optim.eval_with_ema { "ema" } else { "generator" };
    for (k, v) in archive.namespace(ns) {
        store.insert(&k, &v)?;
    }
    let g = Generator::new_detached(&mut store, &cfg.model, schedule.active_stages())?;
    Ok((cfg, g))
}
