use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::metrics::{evaluate, MetricsReport};
use super::trainer::{TrainConfig, Trainer};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::net::{GateMode, SkipMode};

/// The four architecture variants of the component study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    Base,
    WithHsa,
    WithFs,
    Total,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Base,
        AblationVariant::WithHsa,
        AblationVariant::WithFs,
        AblationVariant::Total,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Base => "Base",
            AblationVariant::WithHsa => "w/HSA",
            AblationVariant::WithFs => "w/FS",
            AblationVariant::Total => "Total",
        }
    }

    /// Rewrites only the skip topology and the gate flag. Full-scale variants
    /// keep the base config's full-scale mode, or use the neighbor topology
    /// when the base is plain.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let full = if base.model.skip_mode.is_full_scale() {
            base.model.skip_mode
        } else {
            SkipMode::FullScaleNeighbor
        };
        let (mode, gates) = match self {
            AblationVariant::Base => (SkipMode::Plain, false),
            AblationVariant::WithHsa => (SkipMode::Plain, true),
            AblationVariant::WithFs => (full, false),
            AblationVariant::Total => (full, true),
        };
        let mut c = base.clone();
        c.model.skip_mode = mode;
        c.model.gates = gates;
        c
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: AblationVariant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    /// One line per variant: foreground Dice, F1-based Average, and lumen Dice.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>10} {:>10} {:>10} {:>10}\n",
            "variant", "fg Dice", "fg Avg", "mean Dice", "lumen Dice"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:>10.2} {:>10.2} {:>10.2} {:>10.2}\n",
                r.variant.label(),
                r.mean.foreground_dice(),
                r.mean.foreground_average(),
                r.mean.mean_dice(),
                r.mean.classes.get(1).map_or(0.0, |c| c.dice)
            ));
        }
        s
    }
}

/// Worker count: `FHSEG_THREADS` when set to a positive integer, else the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("FHSEG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every variant with every seed on identical data and schedules,
/// then evaluates on `test`. Jobs may run on several threads; results are
/// collected by job index so the report does not depend on scheduling.
pub fn run_ablation(
    base: &TrainConfig,
    train: &[Sample],
    test: &[Sample],
    seeds: &[u64],
    threads: usize,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    base.validate()?;
    let jobs: Vec<(AblationVariant, u64)> = AblationVariant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<MetricsReport>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run = |v: AblationVariant, seed: u64| -> Result<MetricsReport> {
        let mut cfg = v.apply(base);
        cfg.seed = seed;
        let mut t = Trainer::new(cfg)?;
        t.fit(train, |_, _| Ok(()))?;
        evaluate(&t.model, test, GateMode::Learned)
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, seed)) = jobs.get(i) else { break };
                let r = run(v, seed);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    let mut rows = Vec::new();
    for (vi, &v) in AblationVariant::ALL.iter().enumerate() {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for si in 0..seeds.len() {
            per_seed.push(results[vi * seeds.len() + si].take().expect("job ran")?);
        }
        rows.push(AblationRow {
            variant: v,
            mean: MetricsReport::mean_of(&per_seed)?,
            per_seed,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
