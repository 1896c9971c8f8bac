//! Criterion 2: with `max_active_keys = 1` the engine's final weights after
//! training are bit-identical to a plain single-threaded SGD loop following
//! the same update schedule.

use driftnet::data::{gen_list_reduction, LIST_CLASSES, LIST_VOCAB};
use driftnet::models::{build_model, pump_rnn, ModelSpec};
use driftnet::optim::OptimizerKind;
use driftnet::runtime::{Engine, EngineConfig};

use crate::reference::RnnOracle;
use crate::{Env, Verdict};

const N: usize = 1000;
const EMBED: usize = 16;
const HIDDEN: usize = 32;
const MUF: usize = 7;
const LR: f64 = 0.05;
const SEED: u64 = 42;
const EPOCHS: usize = 2;

pub fn run(_env: &Env) -> Verdict {
    let data = gen_list_reduction(N, 4242);
    let pumps: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(i, inst)| pump_rnn(i as i64, &inst.tokens(), HIDDEN, inst.label as usize))
        .collect();

    let graph = build_model(&ModelSpec::Rnn {
        vocab: LIST_VOCAB,
        embed: EMBED,
        hidden: HIDDEN,
        classes: LIST_CLASSES,
    })
    .unwrap();
    let cfg = EngineConfig {
        workers: 2,
        max_active_keys: 1,
        min_update_frequency: MUF,
        optimizer: OptimizerKind::sgd(LR),
        seed: SEED,
        ..EngineConfig::default()
    };
    let mut engine = match Engine::new(graph, None, cfg) {
        Ok(e) => e,
        Err(e) => return Verdict::Fail(format!("engine setup: {e}")),
    };

    let mut oracle = RnnOracle::from_snapshot(&engine.params_snapshot(), EMBED, HIDDEN, MUF, LR);
    let sequences: Vec<(Vec<usize>, usize)> = data
        .iter()
        .map(|inst| (inst.tokens(), inst.label as usize))
        .collect();

    for epoch in 0..EPOCHS {
        let report = match engine.run_train_epoch(&pumps) {
            Ok(r) => r,
            Err(e) => return Verdict::Fail(format!("epoch {epoch}: {e}")),
        };
        if report.skipped_non_finite != 0 {
            return Verdict::Fail(format!(
                "epoch {epoch}: engine skipped {} non-finite losses, schedules diverge",
                report.skipped_non_finite
            ));
        }
        oracle.train_epoch(&sequences);
    }

    let got = engine.params_snapshot();
    let want = oracle.params();
    let mut scalars = 0usize;
    for ((gn, gts), (wn, wts)) in got.iter().zip(&want) {
        if gn != wn {
            return Verdict::Fail(format!("block order mismatch: engine `{gn}` vs oracle `{wn}`"));
        }
        if gts.len() != wts.len() {
            return Verdict::Fail(format!("block `{gn}`: tensor count differs"));
        }
        for (ti, (gt, wt)) in gts.iter().zip(wts).enumerate() {
            if gt.data().len() != wt.len() {
                return Verdict::Fail(format!("block `{gn}` tensor {ti}: shape differs"));
            }
            for (i, (gv, wv)) in gt.data().iter().zip(wt).enumerate() {
                if gv.to_bits() != wv.to_bits() {
                    return Verdict::Fail(format!(
                        "block `{gn}` tensor {ti} element {i}: engine {gv:.17e} \
                         ({:#018x}) vs reference {wv:.17e} ({:#018x})",
                        gv.to_bits(),
                        wv.to_bits()
                    ));
                }
                scalars += 1;
            }
        }
    }
    if got.len() != want.len() {
        return Verdict::Fail(format!(
            "parameter block count differs: engine {} vs oracle {}",
            got.len(),
            want.len()
        ));
    }
    Verdict::Pass(format!(
        "{N} instances x {EPOCHS} epochs, muf {MUF}: all {scalars} weights bit-identical"
    ))
}
