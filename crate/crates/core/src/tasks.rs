//! Synthetic tasks with checkable answers.
//!
//! Every prompt is `<bos>` followed by the task text; completions end with
//! `#<answer>` and `<eos>`. The reward is 1 exactly when the text after the
//! last `#` equals the canonical answer.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::policy::{log_prob, GradientVector, PolicyParams, TokenId, Trajectory, Vocab};
use crate::rng::rng_from;

/// Seeds at or above this value belong to evaluation splits.
pub const EVAL_SEED_BASE: u64 = 1 << 62;

/// Upper bound on `vocab^max_len` for exhaustive enumeration.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

const LETTERS: &str = "abcdefgh";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// `a+b=` with `difficulty`-digit operands.
    Add,
    /// `a%b=` with a `difficulty`-digit dividend and a divisor in 2..=9.
    Mod,
    /// `s→` with `difficulty` letters; the answer is `s` reversed.
    Reverse,
    /// `bits?` with `difficulty` bits; the answer is the parity.
    Parity,
    /// One-letter prompt over a five-token vocab; small enough to enumerate.
    Micro,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::Add => "add",
            TaskKind::Mod => "mod",
            TaskKind::Reverse => "reverse",
            TaskKind::Parity => "parity",
            TaskKind::Micro => "micro",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verbosity {
    /// Answer only.
    Terse,
    /// Intermediate steps, then the answer.
    Stepwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    kind: TaskKind,
    difficulty: usize,
    vocab: Vocab,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, difficulty: usize) -> Result<Self> {
        if difficulty == 0 {
            return input("difficulty must be at least 1");
        }
        let symbols = match kind {
            TaskKind::Add => "0123456789+=c,",
            TaskKind::Mod => "0123456789%=,",
            TaskKind::Reverse => "abcdefgh→,",
            TaskKind::Parity => "01?,",
            TaskKind::Micro => "ab",
        };
        if matches!(kind, TaskKind::Add | TaskKind::Mod) && difficulty > 15 {
            return input("arithmetic difficulty above 15 digits is not supported");
        }
        Ok(Self { kind, difficulty, vocab: Vocab::with_symbols(symbols)? })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn difficulty(&self) -> usize {
        self.difficulty
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Same task kind at another difficulty.
    pub fn with_difficulty(&self, difficulty: usize) -> Result<Self> {
        Self::new(self.kind, difficulty)
    }

    /// Longest prompt in tokens, `<bos>` included.
    pub fn max_prompt_len(&self) -> usize {
        let d = self.difficulty;
        1 + match self.kind {
            TaskKind::Add => 2 * d + 2,
            TaskKind::Mod => d + 3,
            TaskKind::Reverse | TaskKind::Parity => d + 1,
            TaskKind::Micro => 1,
        }
    }

    /// Long enough for the stepwise expert trace plus `<eos>`.
    pub fn max_completion_len(&self) -> usize {
        let d = self.difficulty;
        match self.kind {
            TaskKind::Add => 5 * d + 3,
            TaskKind::Mod => 2 * d + 3,
            TaskKind::Reverse => 3 * d + 2,
            TaskKind::Parity => 2 * d + 3,
            TaskKind::Micro => 4,
        }
    }
}

/// One prompt x with its canonical answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub prompt: String,
    pub answer: String,
    pub seed: u64,
    #[serde(skip)]
    prompt_tokens: Vec<TokenId>,
}

impl ProblemInstance {
    pub fn new(task: &TaskSpec, prompt: String, answer: String, seed: u64) -> Result<Self> {
        let mut prompt_tokens = vec![task.vocab.bos()];
        prompt_tokens.extend(task.vocab.encode(&prompt)?);
        task.vocab.encode(&answer)?;
        Ok(Self { prompt, answer, seed, prompt_tokens })
    }

    /// `<bos>` followed by the encoded prompt text.
    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.prompt_tokens
    }
}

fn operand(rng: &mut impl Rng, digits: usize) -> u64 {
    if digits == 1 {
        rng.random_range(0..10)
    } else {
        let lo = 10u64.pow(digits as u32 - 1);
        rng.random_range(lo..lo * 10)
    }
}

pub fn generate_instance(task: &TaskSpec, seed: u64) -> ProblemInstance {
    let mut rng = rng_from(seed);
    let d = task.difficulty;
    let (prompt, answer) = match task.kind {
        TaskKind::Add => {
            let (a, b) = (operand(&mut rng, d), operand(&mut rng, d));
            (format!("{a}+{b}="), (a + b).to_string())
        }
        TaskKind::Mod => {
            let a = operand(&mut rng, d);
            let b: u64 = rng.random_range(2..=9);
            (format!("{a}%{b}="), (a % b).to_string())
        }
        TaskKind::Reverse => {
            let letters: Vec<char> = LETTERS.chars().collect();
            let s: String = (0..d).map(|_| letters[rng.random_range(0..letters.len())]).collect();
            (format!("{s}→"), s.chars().rev().collect())
        }
        TaskKind::Parity => {
            let bits: Vec<u8> = (0..d).map(|_| rng.random_range(0..2)).collect();
            let ones = bits.iter().filter(|&&b| b == 1).count();
            (bits.iter().map(|b| b.to_string()).collect::<String>() + "?", (ones % 2).to_string())
        }
        TaskKind::Micro => {
            let flip = rng.random_bool(0.5);
            let (x, y) = if flip { ("a", "b") } else { ("b", "a") };
            (x.to_string(), y.to_string())
        }
    };
    ProblemInstance::new(task, prompt, answer, seed).expect("generated text is in the task vocab")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// `n` instances with seeds `start..start + n` inside the split's seed range.
pub fn instance_pool(task: &TaskSpec, split: Split, start: u64, n: usize) -> Vec<ProblemInstance> {
    let base = match split {
        Split::Train => start % EVAL_SEED_BASE,
        Split::Eval => EVAL_SEED_BASE + start % EVAL_SEED_BASE,
    };
    (0..n as u64).map(|i| generate_instance(task, base + i)).collect()
}

/// Text after the last `#`, whitespace-trimmed. `None` when there is no `#`.
pub fn extract_answer(vocab: &Vocab, completion: &[TokenId]) -> Option<String> {
    let pos = completion.iter().rposition(|&t| t == vocab.delim())?;
    Some(vocab.render(&completion[pos + 1..]).trim().to_string())
}

/// 1 if the final answer matches exactly, else 0.
pub fn reward(task: &TaskSpec, instance: &ProblemInstance, traj: &Trajectory) -> f64 {
    match extract_answer(&task.vocab, &traj.completion) {
        Some(ans) if ans == instance.answer.trim() => 1.0,
        _ => 0.0,
    }
}

fn digits_lsb(x: u64, width: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(width);
    let mut x = x;
    for _ in 0..width {
        out.push(x % 10);
        x /= 10;
    }
    out
}

fn parse_operands(prompt: &str, op: char) -> Result<(u64, u64)> {
    let body = prompt.trim_end_matches('=');
    let (a, b) = body.split_once(op).ok_or_else(|| Error::Input(format!("prompt {prompt:?} has no {op:?}")))?;
    let parse = |s: &str| s.parse::<u64>().map_err(|e| Error::Input(format!("{prompt:?}: {e}")));
    Ok((parse(a)?, parse(b)?))
}

/// Expert trace text (without `<eos>`).
pub fn expert_text(task: &TaskSpec, instance: &ProblemInstance, verbosity: Verbosity) -> Result<String> {
    let answer = &instance.answer;
    let mut steps = String::new();
    if verbosity == Verbosity::Stepwise {
        match task.kind {
            TaskKind::Add => {
                let (a, b) = parse_operands(&instance.prompt, '+')?;
                let width = a.max(b).to_string().len();
                let mut carry = 0;
                for (x, y) in digits_lsb(a, width).into_iter().zip(digits_lsb(b, width)) {
                    let s = x + y + carry;
                    carry = s / 10;
                    steps.push_str(&format!("{}c{},", s % 10, carry));
                }
            }
            TaskKind::Mod => {
                let (a, b) = parse_operands(&instance.prompt, '%')?;
                let mut r = 0;
                for ch in a.to_string().chars() {
                    r = (r * 10 + ch.to_digit(10).expect("decimal digit") as u64) % b;
                    steps.push_str(&format!("{r},"));
                }
            }
            TaskKind::Reverse => {
                for ch in answer.chars() {
                    steps.push(ch);
                    steps.push(',');
                }
            }
            TaskKind::Parity => {
                let mut p = 0;
                for ch in instance.prompt.trim_end_matches('?').chars() {
                    p ^= (ch == '1') as u8;
                    steps.push_str(&format!("{p},"));
                }
            }
            TaskKind::Micro => {}
        }
    }
    Ok(format!("{steps}#{answer}"))
}

/// Expert completion terminated by `<eos>`. The expert is deterministic, so
/// its recorded log-probs are all zero.
pub fn expert_trajectory(task: &TaskSpec, instance: &ProblemInstance, verbosity: Verbosity) -> Result<Trajectory> {
    let mut completion = task.vocab.encode(&expert_text(task, instance, verbosity)?)?;
    completion.push(task.vocab.eos());
    let log_probs = vec![0.0; completion.len()];
    Ok(Trajectory { prompt: instance.prompt_tokens().to_vec(), completion, log_probs })
}

/// All completions of at most `max_len` tokens over a `vocab_size` alphabet,
/// where `eos` ends a completion early.
pub fn enumerate_completions(vocab_size: usize, eos: TokenId, max_len: usize) -> Result<Vec<Vec<TokenId>>> {
    let bound = (vocab_size as u64).checked_pow(max_len as u32);
    if bound.is_none_or(|b| b > ENUMERATION_LIMIT) {
        return Err(Error::Capacity(format!(
            "{vocab_size}^{max_len} completions exceed the enumeration limit {ENUMERATION_LIMIT}"
        )));
    }
    if eos as usize >= vocab_size {
        return input(format!("eos {eos} is outside a vocab of {vocab_size}"));
    }
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::with_capacity(frontier.len() * (vocab_size - 1));
        for prefix in frontier {
            for tok in 0..vocab_size as TokenId {
                let mut seq = prefix.clone();
                seq.push(tok);
                if tok == eos {
                    out.push(seq);
                } else {
                    next.push(seq);
                }
            }
        }
        frontier = next;
    }
    out.extend(frontier);
    Ok(out)
}

/// Every completion of one prompt, with exact probabilities under any params.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Vec<TokenId>>,
}

impl Enumeration {
    /// Trajectories carrying their log-probs under `params`, paired with
    /// their exact probability.
    pub fn trajectories(&self, params: &PolicyParams) -> Result<Vec<(Trajectory, f64)>> {
        self.completions
            .iter()
            .map(|c| {
                let mut traj =
                    Trajectory { prompt: self.prompt.clone(), completion: c.clone(), log_probs: vec![0.0; c.len()] };
                let lp = log_prob(params, &traj)?;
                traj.log_probs = lp.per_token;
                Ok((traj, lp.total.exp()))
            })
            .collect()
    }

    pub fn probabilities(&self, params: &PolicyParams) -> Result<Vec<f64>> {
        Ok(self.trajectories(params)?.into_iter().map(|(_, p)| p).collect())
    }

    /// Exact `E[r]` and `∇ E[r] = Σ P(y) r(y) ∇ log P(y)`.
    pub fn exact_objective(
        &self,
        params: &PolicyParams,
        reward: impl Fn(&Trajectory) -> f64,
    ) -> Result<(f64, GradientVector)> {
        let mut value = 0.0;
        let mut grad = GradientVector::zeros_like(params);
        for (traj, p) in self.trajectories(params)? {
            let r = reward(&traj);
            if r != 0.0 {
                value += p * r;
                crate::policy::accumulate_grad_log_prob(params, &traj, p * r, grad.as_mut_slice())?;
            }
        }
        Ok((value, grad))
    }
}

pub fn enumerate_all_trajectories(task: &TaskSpec, prompt: &[TokenId], max_len: usize) -> Result<Enumeration> {
    if task.kind != TaskKind::Micro {
        return input(format!("exhaustive enumeration is only offered for the micro task, not {}", task.kind));
    }
    let completions = enumerate_completions(task.vocab.len(), task.vocab.eos(), max_len)?;
    Ok(Enumeration { prompt: prompt.to_vec(), completions })
}

/// One JSON object per line: `{"prompt": ..., "answer": ..., "seed": ...}`.
pub fn write_instances(mut w: impl Write, instances: &[ProblemInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instances(r: impl BufRead, task: &TaskSpec) -> Result<Vec<ProblemInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ProblemInstance = serde_json::from_str(&line)?;
        out.push(ProblemInstance::new(task, raw.prompt, raw.answer, raw.seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete(task: &TaskSpec, text: &str, eos: bool) -> Trajectory {
        let mut completion = task.vocab().encode(text).unwrap();
        if eos {
            completion.push(task.vocab().eos());
        }
        Trajectory { prompt: vec![task.vocab().bos()], log_probs: vec![0.0; completion.len()], completion }
    }

    #[test]
    fn add_instance_matches_hand_arithmetic() {
        let task = TaskSpec::new(TaskKind::Add, 2).unwrap();
        let inst = generate_instance(&task, 12345);
        // independent check: split the prompt text by hand and add
        let body = inst.prompt.strip_suffix('=').unwrap();
        let (a, b) = body.split_once('+').unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        let sum: u32 = a.parse::<u32>().unwrap() + b.parse::<u32>().unwrap();
        assert_eq!(inst.answer, sum.to_string());
        assert_eq!(inst, generate_instance(&task, 12345));
    }

    #[test]
    fn reverse_instance() {
        let task = TaskSpec::new(TaskKind::Reverse, 3).unwrap();
        let inst = generate_instance(&task, 7);
        let s = inst.prompt.strip_suffix('→').unwrap();
        assert_eq!(s.chars().count(), 3);
        assert_eq!(inst.answer, s.chars().rev().collect::<String>());
        let fixed = ProblemInstance::new(&task, "abc→".into(), "cba".into(), 0).unwrap();
        assert_eq!(task.vocab().render(fixed.prompt_tokens()), "<bos>abc→");
    }

    #[test]
    fn rewards() {
        let task = TaskSpec::new(TaskKind::Add, 2).unwrap();
        let inst = ProblemInstance::new(&task, "47+35=".into(), "82".into(), 0).unwrap();
        assert_eq!(reward(&task, &inst, &complete(&task, "7c1,#82", true)), 1.0);
        assert_eq!(reward(&task, &inst, &complete(&task, "82", true)), 0.0);
        assert_eq!(reward(&task, &inst, &complete(&task, "#082", true)), 0.0);
        assert_eq!(reward(&task, &inst, &complete(&task, "#8#82", false)), 1.0);
        assert_eq!(reward(&task, &inst, &complete(&task, "#82#", true)), 0.0);
    }

    #[test]
    fn add_traces() {
        let task = TaskSpec::new(TaskKind::Add, 2).unwrap();
        let inst = ProblemInstance::new(&task, "47+35=".into(), "82".into(), 0).unwrap();
        assert_eq!(expert_text(&task, &inst, Verbosity::Terse).unwrap(), "#82");
        assert_eq!(expert_text(&task, &inst, Verbosity::Stepwise).unwrap(), "2c1,8c0,#82");
        let inst = ProblemInstance::new(&task, "95+87=".into(), "182".into(), 0).unwrap();
        assert_eq!(expert_text(&task, &inst, Verbosity::Stepwise).unwrap(), "2c1,8c1,#182");
    }

    #[test]
    fn other_traces() {
        let m = TaskSpec::new(TaskKind::Mod, 2).unwrap();
        let inst = ProblemInstance::new(&m, "47%5=".into(), "2".into(), 0).unwrap();
        assert_eq!(expert_text(&m, &inst, Verbosity::Stepwise).unwrap(), "4,2,#2");
        let r = TaskSpec::new(TaskKind::Reverse, 3).unwrap();
        let inst = ProblemInstance::new(&r, "abc→".into(), "cba".into(), 0).unwrap();
        assert_eq!(expert_text(&r, &inst, Verbosity::Stepwise).unwrap(), "c,b,a,#cba");
        let p = TaskSpec::new(TaskKind::Parity, 4).unwrap();
        let inst = ProblemInstance::new(&p, "1101?".into(), "1".into(), 0).unwrap();
        assert_eq!(expert_text(&p, &inst, Verbosity::Stepwise).unwrap(), "1,0,0,1,#1");
    }

    #[test]
    fn expert_traces_fit_and_score() {
        for kind in [TaskKind::Add, TaskKind::Mod, TaskKind::Reverse, TaskKind::Parity, TaskKind::Micro] {
            for d in 1..=4 {
                let task = TaskSpec::new(kind, d).unwrap();
                for inst in instance_pool(&task, Split::Train, 0, 200) {
                    assert!(inst.prompt_tokens().len() <= task.max_prompt_len(), "{kind} {}", inst.prompt);
                    for v in [Verbosity::Terse, Verbosity::Stepwise] {
                        let t = expert_trajectory(&task, &inst, v).unwrap();
                        assert!(t.len() <= task.max_completion_len(), "{kind} {d} {v:?}");
                        assert_eq!(reward(&task, &inst, &t), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn enumeration_counts() {
        let all = enumerate_completions(2, 1, 2).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.contains(&vec![1]));
        assert!(all.contains(&vec![0, 1]));
        assert!(all.contains(&vec![0, 0]));
        assert!(matches!(enumerate_completions(10, 1, 7), Err(Error::Capacity(_))));
        let micro = TaskSpec::new(TaskKind::Micro, 1).unwrap();
        assert_eq!(micro.vocab().len(), 5);
        assert_eq!(enumerate_all_trajectories(&micro, &[0, 3], 4).unwrap().completions.len(), 1 + 4 + 16 + 64 + 256);
        let add = TaskSpec::new(TaskKind::Add, 1).unwrap();
        assert!(enumerate_all_trajectories(&add, &[0], 2).is_err());
    }

    #[test]
    fn instance_io_round_trip() {
        let task = TaskSpec::new(TaskKind::Mod, 3).unwrap();
        let pool = instance_pool(&task, Split::Eval, 0, 20);
        assert!(pool.iter().all(|i| i.seed >= EVAL_SEED_BASE));
        let mut buf = Vec::new();
        write_instances(&mut buf, &pool).unwrap();
        let back = read_instances(buf.as_slice(), &task).unwrap();
        assert_eq!(back, pool);
    }

    #[test]
    fn zero_difficulty_rejected() {
        assert!(TaskSpec::new(TaskKind::Add, 0).is_err());
    }
}
