#![allow(dead_code)]

pub mod graphs;
pub mod shifts;

use kelab::base::{init_base_model, train_base, BaseTrainConfig};
use kelab::data::{build_dataset, generate_world, Dataset, Example, Split, TaskKind};
use kelab::params::ParamSet;
use kelab::requests::{build_edit_requests, EditRequest};
use kelab::trainer::{HistoryRow, MarginSchedule};

pub struct Tiny {
    pub ds: Dataset,
    pub theta: ParamSet,
    pub train: Vec<EditRequest>,
    pub val: Vec<EditRequest>,
    pub test: Vec<EditRequest>,
}

impl Tiny {
    pub fn pool(&self, split: Split) -> Vec<&Example> {
        self.ds.subset(split)
    }
}

/// A 64-fact QA world with a base model trained to memorise it.
pub fn tiny(seed: u64) -> Tiny {
    let world = generate_world(seed, 16, 4, 8, 3).unwrap();
    let ds = build_dataset(world, TaskKind::Qa, seed + 1).unwrap();
    let theta0 = init_base_model(16, 32, ds.n_classes(), ds.vocab_size(), seed + 2).unwrap();
    let all: Vec<&Example> = ds.examples.iter().collect();
    let cfg = BaseTrainConfig {
        lr: 0.1,
        max_epochs: 150,
        seed: seed + 3,
        stop_at_train_accuracy: Some(1.0),
        ..BaseTrainConfig::default()
    };
    let (theta, _) = train_base(&theta0, &all, &ds.subset(Split::Validation), &cfg).unwrap();
    let train = build_edit_requests(&theta, &ds, Split::Train, seed + 4).unwrap();
    let val = build_edit_requests(&theta, &ds, Split::Validation, seed + 5).unwrap();
    let test = build_edit_requests(&theta, &ds, Split::Test, seed + 6).unwrap();
    Tiny { ds, theta, train, val, test }
}

/// Checks the margin and multiplier trace of a training history.
pub fn check_trace(history: &[HistoryRow], schedule: &MarginSchedule) -> Result<(), String> {
    if history.is_empty() {
        return Err("empty history".into());
    }
    if history[0].margin != schedule.initial {
        return Err(format!("first margin {} is not {}", history[0].margin, schedule.initial));
    }
    for (i, row) in history.iter().enumerate() {
        if row.lambda < 0.0 {
            return Err(format!("step {}: lambda {} < 0", row.step, row.lambda));
        }
        if row.margin < schedule.floor {
            return Err(format!("step {}: margin {} below floor", row.step, row.margin));
        }
        let Some(next) = history.get(i + 1) else { break };
        let annealed = (schedule.factor * row.margin).max(schedule.floor);
        let validated_high = row.val_success.is_some_and(|s| s > schedule.threshold);
        let expected = if validated_high { annealed } else { row.margin };
        if next.margin != expected {
            return Err(format!(
                "step {} -> {}: margin {} -> {}, expected {} (val_success {:?})",
                row.step, next.step, row.margin, next.margin, expected, row.val_success
            ));
        }
    }
    Ok(())
}
