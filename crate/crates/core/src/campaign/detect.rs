//! Differential checks run after the mutation loop: a cheap forward sweep over
//! the pool, then training and inference on both backends for the top-k.

use serde::{Deserialize, Serialize};

use crate::exec::{probe_input, BackendId, Dataset, DatasetConfig, ExecutionTrace, Executor};
use crate::graph::Model;
use crate::oracles::{
    detect_accuracy_defect, detect_crash_defect, detect_efficiency_defect, detect_eval_defect,
    detect_loss_defect, detect_resource_defect, DefectPhase, DefectReport, ModelRef, OracleThresholds,
};
use crate::rng;

/// Which check produced a report; replay reruns the same one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sweep,
    Execution,
}

/// The backend pair plus everything the checks draw inputs from.
pub struct Harness {
    pub a: Executor,
    pub b: Executor,
    pub oracles: OracleThresholds,
    pub dataset: DatasetConfig,
    pub train_steps: usize,
    /// Seeds the sweep probe input and parameter init.
    pub probe_seed: u64,
    /// Seeds the shared parameter init for deep execution.
    pub exec_seed: u64,
}

fn cost(traces: &[&ExecutionTrace]) -> f64 {
    traces.iter().map(|t| t.total_time()).sum()
}

pub fn model_ref(model: &Model) -> ModelRef {
    let hash = model.content_hash();
    ModelRef {
        path: format!("models/{hash}.gm"),
        hash,
    }
}

impl Harness {
    /// Executors with `faults` armed on backend B.
    pub fn new(
        faults: &[String],
        oracles: OracleThresholds,
        dataset: DatasetConfig,
        train_steps: usize,
        master_seed: u64,
    ) -> Result<Self, crate::exec::ExecError> {
        let mut b = Executor::new(BackendId::B);
        for f in faults {
            b.arm_fault(f)?;
        }
        Ok(Self {
            a: Executor::new(BackendId::A),
            b,
            oracles,
            dataset,
            train_steps,
            probe_seed: rng::derive_seed(master_seed, "campaign/probe"),
            exec_seed: rng::derive_seed(master_seed, "campaign/execution"),
        })
    }

    fn stamp(&self, model: &Model, mut reports: Vec<DefectReport>) -> Vec<DefectReport> {
        let r = model_ref(model);
        let active = self.b.faults().active_for(model);
        for rep in &mut reports {
            rep.model_ref = r.clone();
            rep.active_faults = active.clone();
        }
        reports
    }

    /// Forward both backends on the probe batch: a crash on one side only, or
    /// differing non-finite outputs, marks the model defective.
    pub fn sweep(&self, model: &Model) -> (Vec<DefectReport>, f64) {
        let x = probe_input(&model.input_spec, rng::derive_seed(self.probe_seed, "probe/input"));
        let init = rng::derive_seed(self.probe_seed, "probe/init");
        let ta = self.a.forward(model, &x, init);
        let tb = self.b.forward(model, &x, init);
        let ms = cost(&[&ta, &tb]);
        let mut out = Vec::new();
        if let Some(r) = detect_crash_defect(ta.crash.as_ref(), tb.crash.as_ref(), DefectPhase::Mutation) {
            out.push(r);
        } else if ta.crash.is_none() {
            out.extend(
                detect_accuracy_defect(&ta, &tb, &self.oracles, DefectPhase::Mutation)
                    .into_iter()
                    .filter(|r| r.defect_family == crate::oracles::DefectFamily::AccuracyOutlier),
            );
        }
        (self.stamp(model, out), ms)
    }

    /// Train on both backends from one initialization, then infer with each
    /// side's trained parameters and run every oracle on the trace pairs.
    pub fn execute(&self, model: &Model) -> (Vec<DefectReport>, f64) {
        let data = Dataset::for_model(model, &self.dataset);
        let (ta, pa) = self.a.train(model, &data, self.train_steps, self.exec_seed);
        let (tb, pb) = self.b.train(model, &data, self.train_steps, self.exec_seed);
        let mut ms = cost(&[&ta, &tb]);
        let mut out = Vec::new();
        if let Some(r) = detect_crash_defect(ta.crash.as_ref(), tb.crash.as_ref(), DefectPhase::Training) {
            out.push(r);
            return (self.stamp(model, out), ms);
        }
        if ta.crash.is_some() {
            return (Vec::new(), ms);
        }
        out.extend(detect_loss_defect(&ta, &tb, &self.oracles));
        out.extend(detect_efficiency_defect(&ta, &tb, &self.oracles, DefectPhase::Training));
        out.extend(detect_resource_defect(&ta, &tb, &self.oracles, DefectPhase::Training));
        let ia = self.a.infer(model, &data, pa.as_ref(), self.exec_seed);
        let ib = self.b.infer(model, &data, pb.as_ref(), self.exec_seed);
        ms += cost(&[&ia, &ib]);
        if let Some(r) = detect_crash_defect(ia.crash.as_ref(), ib.crash.as_ref(), DefectPhase::Inference) {
            out.push(r);
        } else if ia.crash.is_none() {
            out.extend(detect_eval_defect(&ia, &ib, &self.oracles));
            out.extend(detect_accuracy_defect(&ia, &ib, &self.oracles, DefectPhase::Inference));
        }
        (self.stamp(model, out), ms)
    }

    pub fn run(&self, stage: Stage, model: &Model) -> Vec<DefectReport> {
        match stage {
            Stage::Sweep => self.sweep(model).0,
            Stage::Execution => self.execute(model).0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::DefectFamily;
    use crate::seeds;

    fn harness(faults: &[&str]) -> Harness {
        let faults: Vec<String> = faults.iter().map(|s| s.to_string()).collect();
        Harness::new(&faults, OracleThresholds::default(), DatasetConfig::default(), 8, 3).unwrap()
    }

    #[test]
    fn clean_backends_agree_on_every_seed() {
        let h = harness(&[]);
        for m in seeds::all_builtin() {
            assert_eq!(h.sweep(&m).0, Vec::new(), "{}", m.lineage.seed_id);
            assert_eq!(h.execute(&m).0, Vec::new(), "{}", m.lineage.seed_id);
        }
    }

    #[test]
    fn slowdown_is_reported_as_efficiency() {
        let h = harness(&["quadratic-slowdown"]);
        let vgg = seeds::builtin("vgg_small").unwrap();
        let (reports, _) = h.execute(&vgg);
        let eff: Vec<_> = reports.iter().filter(|r| r.defect_family == DefectFamily::PerformanceEfficiency).collect();
        assert_eq!(eff.len(), 1, "{reports:?}");
        assert!(eff[0].trigger_value().unwrap() > 3.0);
        assert_eq!(eff[0].active_faults, vec!["quadratic-slowdown".to_string()]);
        assert_eq!(eff[0].model_ref.path, format!("models/{}.gm", vgg.content_hash()));
    }

    #[test]
    fn checks_are_deterministic() {
        let h = harness(&["wrong-epsilon-in-norm", "leaked-allocation-per-step"]);
        let m = seeds::builtin("vgg_small").unwrap();
        assert_eq!(h.execute(&m), h.execute(&m));
        assert_eq!(h.sweep(&m), h.sweep(&m));
    }
}
