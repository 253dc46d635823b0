//! Branch-control policies: hard switch selection, soft router selection,
//! and the recommendation boundary that names the target style.
//!
//! The recommender is a synchronous request/response interface so an
//! external process can replace the built-in agents without touching the
//! trainer. Three implementations ship: an oracle (always the true style),
//! a simulated agent with configurable accuracy, and a line-protocol bridge
//! to an external command.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// One-hot branch weights for hard selection.
pub fn switch_alpha(style_index: usize, n: usize) -> Result<Vec<f64>> {
    if style_index >= n {
        return Err(Error::Routing(format!(
            "style index {style_index} out of range for {n} branches"
        )));
    }
    let mut alpha = vec![0.0; n];
    alpha[style_index] = 1.0;
    Ok(alpha)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateScope {
    Global,
    PerSite,
}

/// Linear gate producing branch weights: `softmax(W · h + b)` over a pooled
/// hidden state. Zero-initialized so routing starts uniform.
#[derive(Clone, Debug)]
pub struct RouterGate {
    pub weight: Tensor, // [n, d_model]
    pub bias: Tensor,   // [n]
}

impl RouterGate {
    pub fn new(n: usize, d_model: usize) -> Self {
        RouterGate {
            weight: Tensor::zeros(vec![n, d_model]).with_grad(),
            bias: Tensor::zeros(vec![n]).with_grad(),
        }
    }

    pub fn n_branches(&self) -> usize {
        self.bias.numel()
    }

    /// Branch weights on a tape, differentiable through the gate and the
    /// pooled hidden state.
    pub fn alpha_tape(&self, tape: &mut Tape, weight: Var, bias: Var, pooled: Var) -> Result<Var> {
        let logits = tape.matvec(weight, pooled)?;
        let shifted = tape.add(logits, bias)?;
        tape.softmax_vec(shifted)
    }

    /// Value-level branch weights for inference.
    pub fn alpha_value(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = tape.constant(&self.weight);
        let b = tape.constant(&self.bias);
        let h = tape.constant(&Tensor::vector(pooled.to_vec()));
        let alpha = self.alpha_tape(&mut tape, w, b, h)?;
        Ok(tape.data(alpha).to_vec())
    }
}

/// Free-function form of the soft selection: `softmax(W · h + b)`.
pub fn router_alpha(gate: &RouterGate, pooled_hidden: &[f64]) -> Result<Vec<f64>> {
    if pooled_hidden.len() != gate.weight.shape()[1] {
        return Err(Error::Dimension {
            op: "router_alpha",
            lhs: gate.weight.shape().to_vec(),
            rhs: vec![pooled_hidden.len()],
        });
    }
    gate.alpha_value(pooled_hidden)
}

// ── Recommendation boundary ─────────────────────────────────────────────

/// Names the target style for one expert text. `true_style` is available to
/// the built-in agents (the oracle uses it, the simulator corrupts it); the
/// exec bridge never sees it.
pub trait Recommender {
    fn recommend(
        &mut self,
        expert_text: &str,
        true_style: &str,
        candidates: &[String],
    ) -> Result<String>;
}

/// Always answers with the true style (the 100%-accuracy baseline).
pub struct OracleRecommender;

impl Recommender for OracleRecommender {
    fn recommend(&mut self, _expert: &str, true_style: &str, candidates: &[String]) -> Result<String> {
        if !candidates.iter().any(|c| c == true_style) {
            return Err(Error::Routing(format!("true style {true_style:?} not in candidates")));
        }
        Ok(true_style.to_string())
    }
}

/// Emits the true style with probability `accuracy`, otherwise a uniformly
/// random wrong style. Both random draws happen on every query, so runs at
/// different accuracy levels with the same seed corrupt nested sample sets.
pub struct SimulatedAgent {
    accuracy: f64,
    rng: ChaCha8Rng,
}

impl SimulatedAgent {
    pub fn new(accuracy: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Config(format!("recommendation accuracy {accuracy} not in [0, 1]")));
        }
        Ok(SimulatedAgent { accuracy, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }

    /// Index form: answer the true index with probability `accuracy`, else
    /// one of the other `n - 1` indices uniformly.
    pub fn recommend_index(&mut self, true_index: usize, n: usize) -> Result<usize> {
        if true_index >= n {
            return Err(Error::Routing(format!("true index {true_index} out of range for {n}")));
        }
        if n < 2 && self.accuracy < 1.0 {
            return Err(Error::Config(
                "an imperfect agent needs at least 2 styles to be wrong about".into(),
            ));
        }
        let u: f64 = self.rng.random();
        let wrong_pos = if n >= 2 { self.rng.random_range(0..n - 1) } else { 0 };
        if u < self.accuracy {
            Ok(true_index)
        } else {
            // wrong_pos indexes the candidates with the true one removed
            Ok(if wrong_pos >= true_index { wrong_pos + 1 } else { wrong_pos })
        }
    }
}

impl Recommender for SimulatedAgent {
    fn recommend(&mut self, _expert: &str, true_style: &str, candidates: &[String]) -> Result<String> {
        let true_index = candidates
            .iter()
            .position(|c| c == true_style)
            .ok_or_else(|| Error::Routing(format!("true style {true_style:?} not in candidates")))?;
        let idx = self.recommend_index(true_index, candidates.len())?;
        Ok(candidates[idx].clone())
    }
}

/// Index-level convenience mirroring the simulated agent contract.
pub fn recommend(agent: &mut SimulatedAgent, true_style: usize, n: usize) -> Result<usize> {
    agent.recommend_index(true_style, n)
}

/// Bridges the recommendation boundary to an external process over a
/// line-delimited protocol: one query per line (tab-separated sha256 hex of
/// the expert text, then the candidate labels), one label per line back.
pub struct ExecRecommender {
    child: Child,
    reader: BufReader<std::process::ChildStdout>,
}

impl ExecRecommender {
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Recommender(format!("cannot spawn {command:?}: {e}")))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| Error::Recommender("no stdout from recommender process".into()))?;
        Ok(ExecRecommender { child, reader: BufReader::new(stdout) })
    }
}

impl Drop for ExecRecommender {
    fn drop(&mut self) {
        drop(self.child.stdin.take());
        let _ = self.child.wait();
    }
}

impl Recommender for ExecRecommender {
    fn recommend(&mut self, expert: &str, _true_style: &str, candidates: &[String]) -> Result<String> {
        let hash = {
            let mut hasher = Sha256::new();
            hasher.update(expert.as_bytes());
            let digest = hasher.finalize();
            digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        let line = format!("{hash}\t{}\n", candidates.join("\t"));
        let stdin = self
            .child
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Recommender("recommender stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Recommender(format!("write to recommender failed: {e}")))?;
        let mut answer = String::new();
        self.reader
            .read_line(&mut answer)
            .map_err(|e| Error::Recommender(format!("read from recommender failed: {e}")))?;
        let answer = answer.trim().to_string();
        if !candidates.iter().any(|c| c == &answer) {
            return Err(Error::Recommender(format!(
                "recommender answered {answer:?}, not one of {candidates:?}"
            )));
        }
        Ok(answer)
    }
}

/// Counts of (true style, predicted style) pairs; row sums equal per-style
/// sample counts.
pub fn confusion_matrix(predicted: &[usize], trues: &[usize], n: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != trues.len() {
        return Err(Error::Contract(format!(
            "confusion_matrix: {} predictions vs {} truths",
            predicted.len(),
            trues.len()
        )));
    }
    let mut matrix = vec![vec![0u64; n]; n];
    for (&p, &t) in predicted.iter().zip(trues) {
        if p >= n || t >= n {
            return Err(Error::Input(format!("label out of range: true {t}, predicted {p}")));
        }
        matrix[t][p] += 1;
    }
    Ok(matrix)
}

/// Resolves style labels to branch indices in corpus-style order.
pub fn style_index_map(styles: &[String]) -> HashMap<String, usize> {
    styles.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switch_alpha_is_one_hot() {
        assert_eq!(switch_alpha(0, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(switch_alpha(2, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        for n in 1..=8usize {
            for i in 0..n {
                let alpha = switch_alpha(i, n).unwrap();
                assert_eq!(alpha.iter().filter(|&&v| v != 0.0).count(), 1);
                assert_eq!(alpha[i], 1.0);
            }
        }
        assert!(matches!(switch_alpha(3, 3), Err(Error::Routing(_))));
    }

    #[test]
    fn zero_gate_routes_uniformly() {
        let gate = RouterGate::new(4, 6);
        let alpha = router_alpha(&gate, &[0.3, -0.2, 0.9, 0.0, 1.0, -1.0]).unwrap();
        for v in &alpha {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logit_routes_one_hot() {
        let mut gate = RouterGate::new(3, 2);
        gate.bias = Tensor::vector(vec![50.0, 0.0, 0.0]).with_grad();
        let alpha = router_alpha(&gate, &[0.0, 0.0]).unwrap();
        assert!((alpha[0] - 1.0).abs() < 1e-15);
        assert!(alpha[1] < 1e-15 && alpha[2] < 1e-15);
    }

    #[test]
    fn router_alpha_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut gate = RouterGate::new(5, 8);
            gate.weight = Tensor::randn(vec![5, 8], 1.0, &mut rng).with_grad();
            gate.bias = Tensor::randn(vec![5], 1.0, &mut rng).with_grad();
            let pooled: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let alpha = router_alpha(&gate, &pooled).unwrap();
            let sum: f64 = alpha.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_invariant_under_constant_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gate = RouterGate::new(4, 3);
        gate.weight = Tensor::randn(vec![4, 3], 1.0, &mut rng).with_grad();
        gate.bias = Tensor::randn(vec![4], 1.0, &mut rng).with_grad();
        let pooled = [0.4, -1.2, 0.7];
        let base = router_alpha(&gate, &pooled).unwrap();
        let mut shifted_gate = gate.clone();
        let shifted: Vec<f64> = shifted_gate.bias.data().iter().map(|b| b + 7.5).collect();
        shifted_gate.bias = Tensor::vector(shifted).with_grad();
        let moved = router_alpha(&shifted_gate, &pooled).unwrap();
        let argmax = |v: &[f64]| {
            v.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        assert_eq!(argmax(&base), argmax(&moved));
    }

    #[test]
    fn perfect_agent_always_answers_truth() {
        let mut agent = SimulatedAgent::new(1.0, 0).unwrap();
        for i in 0..50 {
            assert_eq!(agent.recommend_index(i % 3, 3).unwrap(), i % 3);
        }
    }

    #[test]
    fn agent_accuracy_concentrates() {
        let mut agent = SimulatedAgent::new(0.6, 7).unwrap();
        let trials = 10_000;
        let truth = 1usize;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            counts[agent.recommend_index(truth, 3).unwrap()] += 1;
        }
        let acc = counts[truth] as f64 / trials as f64;
        assert!((acc - 0.6).abs() <= 0.02, "accuracy {acc}");
        // each wrong style gets (1 - p) / (N - 1) of trials
        for (i, &c) in counts.iter().enumerate() {
            if i == truth {
                continue;
            }
            let share = c as f64 / trials as f64;
            assert!((share - 0.2).abs() <= 0.02, "wrong share {share}");
        }
    }

    #[test]
    fn imperfect_agent_requires_an_alternative() {
        let mut agent = SimulatedAgent::new(0.5, 0).unwrap();
        assert!(matches!(agent.recommend_index(0, 1), Err(Error::Config(_))));
        let mut perfect = SimulatedAgent::new(1.0, 0).unwrap();
        assert_eq!(perfect.recommend_index(0, 1).unwrap(), 0);
    }

    #[test]
    fn confusion_matrix_cases() {
        let diag = confusion_matrix(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(diag[1][1], 2);
        assert_eq!(diag[0][1], 0);

        let column = confusion_matrix(&[2, 2, 2], &[0, 1, 0], 3).unwrap();
        assert_eq!(column[0][2], 2);
        assert_eq!(column[1][2], 1);

        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[5], &[0], 2).is_err());
    }

    #[test]
    fn random_predictions_fill_cells_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 3000;
        let trues: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let m = confusion_matrix(&preds, &trues, 3).unwrap();
        for row in &m {
            for &cell in row {
                assert!((cell as f64 - 1000.0 / 3.0).abs() <= 60.0, "cell {cell}");
            }
        }
    }

    #[test]
    fn exec_recommender_round_trip() {
        // `head -c0` style trick: answer the first candidate for every query
        let mut rec = ExecRecommender::spawn("while read line; do echo \"$line\" | cut -f2; done")
            .unwrap();
        let candidates = vec!["a".to_string(), "b".to_string()];
        let answer = rec.recommend("some expert text", "b", &candidates).unwrap();
        assert_eq!(answer, "a");
    }

    #[test]
    fn exec_recommender_rejects_unknown_label() {
        let mut rec = ExecRecommender::spawn("while read line; do echo nope; done").unwrap();
        let candidates = vec!["a".to_string()];
        assert!(matches!(
            rec.recommend("text", "a", &candidates),
            Err(Error::Recommender(_))
        ));
    }
}
