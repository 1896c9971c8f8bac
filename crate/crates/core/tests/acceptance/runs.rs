//! Shared list-reduction training runs for the convergence, replica, and
//! sweep criteria.

use driftnet::data::{gen_list_reduction, LIST_CLASSES, LIST_VOCAB};
use driftnet::ir::IrGraph;
use driftnet::models::{build_model, pump_rnn, ModelSpec};
use driftnet::runtime::{Engine, InstancePump, RuntimeError};

pub struct ListTask {
    pub train: Vec<InstancePump>,
    pub valid: Vec<InstancePump>,
}

pub fn list_task(n_train: usize, n_valid: usize, hidden: usize, seed: u64) -> ListTask {
    let pumps = |n: usize, seed: u64, base: i64| -> Vec<InstancePump> {
        gen_list_reduction(n, seed)
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                pump_rnn(base + i as i64, &inst.tokens(), hidden, inst.label as usize)
            })
            .collect()
    };
    ListTask {
        train: pumps(n_train, seed, 0),
        valid: pumps(n_valid, seed ^ 0x5eed, 1 << 40),
    }
}

pub fn rnn_graph(embed: usize, hidden: usize) -> IrGraph {
    build_model(&ModelSpec::Rnn {
        vocab: LIST_VOCAB,
        embed,
        hidden,
        classes: LIST_CLASSES,
    })
    .unwrap()
}

pub struct Trained {
    /// Epochs actually run; equals the epoch that first hit the target when
    /// `hit` is set.
    pub epochs: usize,
    pub hit: bool,
    pub best_acc: f64,
    /// Training throughput over all epochs, instances per second.
    pub inst_per_s: f64,
    pub mean_staleness: f64,
}

pub fn train_to_target(
    engine: &mut Engine,
    task: &ListTask,
    target: f64,
    max_epochs: usize,
) -> Result<Trained, RuntimeError> {
    let mut best_acc: f64 = 0.0;
    let mut wall = 0.0;
    let mut instances = 0usize;
    let mut stale_sum = 0u64;
    let mut stale_count = 0u64;
    for epoch in 1..=max_epochs {
        let t = engine.run_train_epoch(&task.train)?;
        wall += t.wall.as_secs_f64();
        instances += t.instances;
        stale_sum += t.staleness.sum;
        stale_count += t.staleness.count;
        let v = engine.run_eval(&task.valid)?;
        let acc = v.loss.accuracy();
        best_acc = best_acc.max(acc);
        if acc >= target {
            return Ok(Trained {
                epochs: epoch,
                hit: true,
                best_acc,
                inst_per_s: instances as f64 / wall,
                mean_staleness: ratio(stale_sum, stale_count),
            });
        }
    }
    Ok(Trained {
        epochs: max_epochs,
        hit: false,
        best_acc,
        inst_per_s: instances as f64 / wall,
        mean_staleness: ratio(stale_sum, stale_count),
    })
}

fn ratio(sum: u64, count: u64) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}
