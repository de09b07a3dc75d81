//! Synthetic domains, the pretraining corpus, deterministic splits, and
//! answer judging.
//!
//! Each domain has a correct target convention and an alternative one that
//! agrees with it on part of the instance space. The pretraining corpus leans
//! towards the alternative, so the frozen reasoner starts well above zero but
//! clearly below ceiling on the correct convention.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numeric::rng::{substream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Arith,
    SortSym,
    StackEval,
}

pub const DOMAINS: [Domain; 3] = [Domain::Arith, Domain::SortSym, Domain::StackEval];

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Arith => "arith",
            Domain::SortSym => "sortsym",
            Domain::StackEval => "stackeval",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DOMAINS
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::parse(format!("unknown domain {s:?}")))
    }
}

/// A prompt with its gold target and final answer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub prompt: String,
    pub target: String,
    pub answer: String,
}

/// Generation parameters of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain: Domain,
    /// arith: largest operand. stackeval: operands are digits regardless.
    pub max_operand: u32,
    /// arith: moduli are drawn from `min_modulus..=max_modulus`.
    pub min_modulus: u32,
    pub max_modulus: u32,
    /// sortsym: string lengths and alphabet size.
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: usize,
    /// Probability of drawing an instance on which the two conventions can
    /// disagree (arith `a+b*c`, stackeval with `-`).
    pub contested_rate: f64,
}

impl DomainSpec {
    pub fn desk(domain: Domain) -> Self {
        Self {
            domain,
            max_operand: 9,
            min_modulus: 5,
            max_modulus: 9,
            min_len: 3,
            max_len: 5,
            alphabet: 6,
            contested_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_operand >= 1 && self.max_operand <= 9, "operands must be single digits");
        ensure!(
            self.min_modulus >= 2 && self.min_modulus <= self.max_modulus && self.max_modulus <= 10,
            "moduli must satisfy 2 <= min <= max <= 10"
        );
        ensure!(
            self.min_len >= 2 && self.min_len <= self.max_len && self.max_len <= 12,
            "sortsym lengths must satisfy 2 <= min <= max <= 12"
        );
        ensure!((2..=8).contains(&self.alphabet), "alphabet size must lie in 2..=8");
        ensure!((0.0..=1.0).contains(&self.contested_rate), "contested rate must lie in [0,1]");
        Ok(())
    }

    /// Number of distinct prompts the spec can produce.
    pub fn capacity(&self) -> u64 {
        match self.domain {
            Domain::Arith => {
                let ops = self.max_operand as u64;
                ops * ops * ops * 4 * (self.max_modulus - self.min_modulus + 1) as u64
            }
            Domain::SortSym => (self.min_len..=self.max_len)
                .map(|l| (self.alphabet as u64).pow(l as u32))
                .sum(),
            Domain::StackEval => 10 * 10 * 10 * 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub domain: Domain,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Which target convention to write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Correct,
    Alternative,
}

/// A drawn instance before rendering.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Instance {
    Arith { a: u32, b: u32, c: u32, ops: [char; 2], m: u32 },
    SortSym { s: Vec<u8> },
    StackEval { a: u32, b: u32, c: u32, ops: [char; 2] },
}

fn draw(spec: &DomainSpec, rng: &mut StreamRng) -> Instance {
    match spec.domain {
        Domain::Arith => {
            let mut d = || rng.random_range(1..=spec.max_operand);
            let (a, b, c) = (d(), d(), d());
            let ops = if rng.random_bool(spec.contested_rate) {
                ['+', '*']
            } else {
                [['+', '+'], ['*', '*'], ['*', '+']][rng.random_range(0..3)]
            };
            let m = rng.random_range(spec.min_modulus..=spec.max_modulus);
            Instance::Arith { a, b, c, ops, m }
        }
        Domain::SortSym => {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let s = (0..len)
                .map(|_| b'a' + rng.random_range(0..spec.alphabet as u8))
                .collect();
            Instance::SortSym { s }
        }
        Domain::StackEval => {
            let mut d = || rng.random_range(0..10u32);
            let (a, b, c) = (d(), d(), d());
            let ops = if rng.random_bool(spec.contested_rate) {
                [['-', '+'], ['+', '-'], ['-', '-']][rng.random_range(0..3)]
            } else {
                ['+', '+']
            };
            Instance::StackEval { a, b, c, ops }
        }
    }
}

fn apply(op: char, x: u32, y: u32, m: u32) -> u32 {
    match op {
        '+' => (x + y) % m,
        '*' => (x * y) % m,
        '-' => (x + m - y % m) % m,
        _ => unreachable!("operator {op}"),
    }
}

fn render(inst: &Instance, conv: Convention) -> Sample {
    match inst {
        &Instance::Arith { a, b, c, ops, m } => {
            let prompt = format!("{a}{}{b}{}{c} mod {m}>", ops[0], ops[1]);
            let precedence = ops == ['+', '*'];
            let steps = if precedence && conv == Convention::Correct {
                let r1 = apply('*', b, c, m);
                let r2 = apply('+', a, r1, m);
                (format!("{b}*{c}={r1},{a}+{r1}={r2}"), r2)
            } else {
                let r1 = apply(ops[0], a, b, m);
                let r2 = apply(ops[1], r1, c, m);
                (format!("{a}{}{b}={r1},{r1}{}{c}={r2}", ops[0], ops[1]), r2)
            };
            let answer = steps.1.to_string();
            Sample {
                prompt,
                target: format!("{}.ANS:{answer}", steps.0),
                answer,
            }
        }
        Instance::SortSym { s } => {
            let prompt = format!("{}>", String::from_utf8_lossy(s));
            let first: Vec<u8> = match conv {
                Convention::Correct => {
                    let mut seen = HashSet::new();
                    s.iter().copied().filter(|c| seen.insert(*c)).collect()
                }
                Convention::Alternative => s.clone(),
            };
            let mut sorted = first.clone();
            sorted.sort_unstable();
            let first = String::from_utf8_lossy(&first).into_owned();
            let answer = String::from_utf8_lossy(&sorted).into_owned();
            Sample {
                prompt,
                target: format!("{first},{answer}.ANS:{answer}"),
                answer,
            }
        }
        &Instance::StackEval { a, b, c, ops } => {
            let prompt = format!("[{a}{b}{}{c}{}]>", ops[0], ops[1]);
            let eval = |op: char, x: u32, y: u32| match (op, conv) {
                ('-', Convention::Alternative) => apply('-', y, x, 10),
                _ => apply(op, x, y, 10),
            };
            let r1 = eval(ops[0], a, b);
            let r2 = eval(ops[1], r1, c);
            let answer = r2.to_string();
            Sample {
                prompt,
                target: format!("{a};{a}{b};{r1};{r1}{c};{r2}.ANS:{answer}"),
                answer,
            }
        }
    }
}

/// Draws `n` samples with prompts not in `taken`, adding them to `taken`.
fn draw_unique(
    spec: &DomainSpec,
    n: usize,
    conv: Convention,
    rng: &mut StreamRng,
    taken: &mut HashSet<String>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n);
    let budget = 200 * n + 10_000;
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > budget {
            return Err(Error::contract(format!(
                "could not draw {n} unique {} instances",
                spec.domain
            )));
        }
        let s = render(&draw(spec, rng), conv);
        if taken.insert(s.prompt.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Train, validation and test splits for one domain, disjoint by prompt.
pub fn generate_domain(spec: &DomainSpec, sizes: &SplitSizes, seed: u64) -> Result<DomainData> {
    spec.validate()?;
    let total = (sizes.train + sizes.val + sizes.test) as u64;
    ensure!(
        total <= spec.capacity() / 2,
        "{} instances requested for {}, which has only {} distinct prompts",
        total,
        spec.domain,
        spec.capacity()
    );
    let mut rng = substream(seed, &format!("datagen/{}", spec.domain));
    let mut taken = HashSet::new();
    let test = draw_unique(spec, sizes.test, Convention::Correct, &mut rng, &mut taken)?;
    let val = draw_unique(spec, sizes.val, Convention::Correct, &mut rng, &mut taken)?;
    let train = draw_unique(spec, sizes.train, Convention::Correct, &mut rng, &mut taken)?;
    for s in test.iter().chain(&val).chain(&train) {
        verify(spec.domain, s)?;
    }
    Ok(DomainData {
        domain: spec.domain,
        train,
        val,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Samples per domain.
    pub per_domain: usize,
    /// Fraction of domain samples written in the alternative convention.
    pub alternative_rate: f64,
    pub filler: usize,
}

/// Pretraining lines as (prompt, continuation) pairs. Prompts in `exclude`
/// (evaluation splits) never appear.
pub fn pretraining_corpus(
    specs: &[DomainSpec],
    cfg: &CorpusConfig,
    seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<(String, String)>> {
    ensure!((0.0..=1.0).contains(&cfg.alternative_rate), "alternative rate must lie in [0,1]");
    let mut rng = substream(seed, "datagen/corpus");
    let mut out = Vec::new();
    for spec in specs {
        spec.validate()?;
        let mut n = 0;
        let mut attempts = 0;
        while n < cfg.per_domain {
            attempts += 1;
            ensure!(attempts < 100 * cfg.per_domain + 10_000, "corpus generation stalled");
            let inst = draw(spec, &mut rng);
            let conv = if rng.random_bool(cfg.alternative_rate) {
                Convention::Alternative
            } else {
                Convention::Correct
            };
            let s = render(&inst, conv);
            if exclude.contains(&s.prompt) {
                continue;
            }
            out.push((s.prompt, s.target));
            n += 1;
        }
    }
    for _ in 0..cfg.filler {
        let len = rng.random_range(3..=8);
        let text: String = (0..len)
            .map(|_| {
                let c = rng.random_range(0..27u8);
                if c == 26 {
                    ' '
                } else {
                    (b'a' + c) as char
                }
            })
            .collect();
        out.push((format!("#{text}|"), text));
    }
    // Interleave domains so that every batch sees a mix.
    let mut idx: Vec<usize> = (0..out.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    Ok(idx.into_iter().map(|i| out[i].clone()).collect())
}

/// Extracts the text after the last `ANS:` and compares it to `gold` after
/// trimming whitespace on both sides.
pub fn judge(generated: &str, gold: &str) -> bool {
    match generated.rfind("ANS:") {
        Some(i) => generated[i + 4..].trim() == gold.trim(),
        None => false,
    }
}

/// Recomputes the answer from the prompt alone with a separate evaluator
/// and checks the sample against it.
pub fn verify(domain: Domain, s: &Sample) -> Result<()> {
    let expected = independent_answer(domain, &s.prompt)?;
    ensure!(
        expected == s.answer && s.target.ends_with(&format!("ANS:{expected}")),
        "sample {:?} disagrees with the independent evaluator ({expected})",
        s.prompt
    );
    Ok(())
}

fn independent_answer(domain: Domain, prompt: &str) -> Result<String> {
    let body = prompt
        .strip_suffix('>')
        .ok_or_else(|| Error::parse(format!("prompt {prompt:?} lacks the '>' marker")))?;
    let bad = || Error::parse(format!("malformed {domain} prompt {prompt:?}"));
    match domain {
        Domain::Arith => {
            let (expr, m) = body.split_once(" mod ").ok_or_else(bad)?;
            let m: i64 = m.parse().map_err(|_| bad())?;
            // Sum of products, evaluated over the integers then reduced.
            let mut total = 0i64;
            for term in expr.split('+') {
                let mut p = 1i64;
                for f in term.split('*') {
                    p *= f.parse::<i64>().map_err(|_| bad())?;
                }
                total += p;
            }
            Ok(total.rem_euclid(m).to_string())
        }
        Domain::SortSym => {
            let set: std::collections::BTreeSet<char> = body.chars().collect();
            Ok(set.into_iter().collect())
        }
        Domain::StackEval => {
            let prog = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .ok_or_else(bad)?;
            let mut stack: Vec<i64> = Vec::new();
            for c in prog.chars() {
                if let Some(d) = c.to_digit(10) {
                    stack.push(d as i64);
                    continue;
                }
                let y = stack.pop().ok_or_else(bad)?;
                let x = stack.pop().ok_or_else(bad)?;
                stack.push(match c {
                    '+' => x + y,
                    '-' => x - y,
                    _ => return Err(bad()),
                });
            }
            ensure!(stack.len() == 1, "program {prompt:?} leaves {} values", stack.len());
            Ok(stack[0].rem_euclid(10).to_string())
        }
    }
}

/// Writes `prompt \t target` lines.
pub fn write_tsv(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        writeln!(f, "{}\t{}", s.prompt, s.target).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tsv(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in std::io::BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    parse_tsv(&text)
}

/// Parses dataset lines. The answer is taken from the target's last `ANS:`.
pub fn parse_tsv(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (prompt, target) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(format!("line {}: expected prompt<TAB>target", n + 1)))?;
        if prompt.is_empty() || target.contains('\t') {
            return Err(Error::parse(format!("line {}: malformed record", n + 1)));
        }
        let i = target
            .rfind("ANS:")
            .ok_or_else(|| Error::parse(format!("line {}: target lacks ANS:", n + 1)))?;
        out.push(Sample {
            prompt: prompt.to_string(),
            target: target.to_string(),
            answer: target[i + 4..].to_string(),
        });
    }
    Ok(out)
}
