//! Synthetic arithmetic word problems standing in for a math benchmark,
//! plus loaders for the newline-delimited dataset format and for the
//! "#### <number>" answer-terminator record schema.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dlab_core::rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalItem {
    pub id: u64,
    pub question: String,
    pub answer: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub train: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
}

const NAMES: &[&str] = &[
    "ana", "ben", "cara", "dan", "eva", "finn", "gia", "hana", "ivan", "jo", "kai", "lena",
    "max", "nia", "omar", "pia", "quinn", "rosa", "sam", "tara",
];

const ITEMS: &[&str] = &[
    "apples", "pears", "coins", "books", "pens", "eggs", "cups", "hats", "keys", "maps",
    "nuts", "pins", "rocks", "seeds", "shells", "stamps", "sticks", "stones", "toys", "cards",
];

fn pick<'a>(rng: &mut rng::ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[(rng::uniform(rng) * options.len() as f64) as usize]
}

fn pick_range(rng: &mut rng::ChaCha8Rng, lo: i64, hi: i64) -> i64 {
    lo + (rng::uniform(rng) * (hi - lo + 1) as f64) as i64
}

/// Deterministic multi-step arithmetic word problems with an 80/20
/// train/test split; questions are unique across the whole set.
pub fn make_synthetic_dataset(size: usize, difficulty: usize, seed: u64) -> Result<SyntheticSplit> {
    if size == 0 {
        bail!("dataset size must be >= 1");
    }
    if !(1..=2).contains(&difficulty) {
        bail!("difficulty must be 1 or 2");
    }
    let mut rng = rng::seeded(seed);
    let mut seen = std::collections::HashSet::new();
    let mut items = Vec::with_capacity(size);
    let mut id = 0u64;
    while items.len() < size {
        let name = pick(&mut rng, NAMES);
        let thing = pick(&mut rng, ITEMS);
        let a = pick_range(&mut rng, 2, 9);
        let add = rng::uniform(&mut rng) < 0.5;
        let b = if add {
            pick_range(&mut rng, 2, 9)
        } else {
            pick_range(&mut rng, 1, a)
        };
        let (question, answer) = if difficulty == 1 {
            let verb = if add { format!("gets {b} more") } else { format!("gives {b} away") };
            let answer = if add { a + b } else { a - b };
            (
                format!("{name} has {a} {thing}. {name} {verb}. how many {thing} now?"),
                answer,
            )
        } else {
            let mid = if add { a + b } else { a - b };
            let verb = if add { format!("gets {b} more") } else { format!("gives {b} away") };
            let sub2 = rng::uniform(&mut rng) < 0.5 && mid > 1;
            let c = if sub2 {
                pick_range(&mut rng, 1, mid)
            } else {
                pick_range(&mut rng, 2, 9)
            };
            let verb2 = if sub2 { format!("gives {c} away") } else { format!("gets {c} more") };
            let answer = if sub2 { mid - c } else { mid + c };
            (
                format!("{name} has {a} {thing}. {name} {verb}. then {name} {verb2}. how many {thing} now?"),
                answer,
            )
        };
        if !seen.insert(question.clone()) {
            continue;
        }
        items.push(EvalItem {
            id,
            question,
            answer: answer as f64,
        });
        id += 1;
    }
    let n_train = (size * 4) / 5;
    let test = items.split_off(n_train);
    Ok(SyntheticSplit { train: items, test })
}

/// Same generator with explicit split sizes instead of the 80/20 ratio.
pub fn make_synthetic_with_counts(
    train_count: usize,
    test_count: usize,
    difficulty: usize,
    seed: u64,
) -> Result<SyntheticSplit> {
    if train_count == 0 || test_count == 0 {
        bail!("both split sizes must be >= 1");
    }
    let whole = make_synthetic_dataset(train_count + test_count, difficulty, seed)?;
    let mut items = whole.train;
    items.extend(whole.test);
    let test = items.split_off(train_count);
    Ok(SyntheticSplit { train: items, test })
}

/// Worked-solution text for a synthetic question, reconstructed from the
/// numbers and verbs in the question plus the gold answer. This is the
/// target text for base-model pretraining, not for distillation.
pub fn gold_response(item: &EvalItem) -> Result<String> {
    let nums: Vec<i64> = item
        .question
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    let ops: Vec<char> = item
        .question
        .split_whitespace()
        .filter_map(|w| match w {
            "gets" => Some('+'),
            "gives" => Some('-'),
            _ => None,
        })
        .collect();
    if nums.len() != ops.len() + 1 || ops.is_empty() {
        bail!("question does not follow the synthetic grammar: {}", item.question);
    }
    let mut acc = nums[0];
    let mut steps = String::new();
    for (op, &n) in ops.iter().zip(&nums[1..]) {
        let next = if *op == '+' { acc + n } else { acc - n };
        steps.push_str(&format!("{acc} {op} {n} = {next}. "));
        acc = next;
    }
    if acc as f64 != item.answer {
        bail!("gold answer {} disagrees with the question text", item.answer);
    }
    Ok(format!("{steps}the final answer is: {acc}."))
}

pub fn save_items(path: &Path, items: &[EvalItem]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_items(path: &Path) -> Result<Vec<EvalItem>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem =
            serde_json::from_str(line).with_context(|| format!("line {} of {}", lineno + 1, path.display()))?;
        items.push(item);
    }
    if items.is_empty() {
        bail!("no records in {}", path.display());
    }
    Ok(items)
}

#[derive(Debug, Deserialize)]
struct SchemaRecord {
    question: String,
    answer: String,
}

/// Loader for the published math-benchmark record schema: JSON lines of
/// {question, answer} where the answer text ends with "#### <number>".
pub fn load_answer_terminator_schema(path: &Path) -> Result<Vec<EvalItem>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SchemaRecord =
            serde_json::from_str(line).with_context(|| format!("line {} of {}", lineno + 1, path.display()))?;
        let tail = rec
            .answer
            .rsplit("#### ")
            .next()
            .with_context(|| format!("line {}: missing '#### ' terminator", lineno + 1))?;
        let cleaned: String = tail
            .trim()
            .chars()
            .filter(|c| *c != ',' && *c != '$')
            .collect();
        let value: f64 = cleaned
            .trim_end_matches('.')
            .parse()
            .with_context(|| format!("line {}: unparsable answer {tail:?}", lineno + 1))?;
        items.push(EvalItem {
            id: lineno as u64,
            question: rec.question,
            answer: value,
        });
    }
    if items.is_empty() {
        bail!("no records in {}", path.display());
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = make_synthetic_dataset(50, 1, 7).unwrap();
        let b = make_synthetic_dataset(50, 1, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_is_80_20_and_disjoint() {
        let s = make_synthetic_dataset(10, 1, 1).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test.len(), 2);
        for t in &s.test {
            assert!(s.train.iter().all(|x| x.question != t.question));
        }
    }

    #[test]
    fn gold_answers_match_expression_evaluation() {
        for difficulty in [1, 2] {
            let s = make_synthetic_dataset(200, difficulty, 3).unwrap();
            for item in s.train.iter().chain(&s.test) {
                let resp = gold_response(item).unwrap();
                assert!(resp.ends_with(&format!("the final answer is: {}.", item.answer as i64)));
                assert!(item.answer >= 0.0);
            }
        }
    }

    #[test]
    fn questions_stay_inside_tokenizer_vocab() {
        let s = make_synthetic_dataset(100, 2, 9).unwrap();
        for item in s.train.iter().chain(&s.test) {
            for t in dlab_core::tokenizer::encode(&item.question) {
                assert_ne!(t, dlab_core::tokenizer::UNK, "{}", item.question);
            }
        }
    }

    #[test]
    fn ndjson_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("items.ndjson");
        let s = make_synthetic_dataset(20, 1, 5).unwrap();
        save_items(&path, &s.train).unwrap();
        assert_eq!(load_items(&path).unwrap(), s.train);
    }

    #[test]
    fn answer_terminator_schema_parses_gold_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"question":"q1","answer":"work work\n#### 18"}"#,
                "\n",
                r#"{"question":"q2","answer":"steps here #### 1,234"}"#,
                "\n",
            ),
        )
        .unwrap();
        let items = load_answer_terminator_schema(&path).unwrap();
        assert_eq!(items[0].answer, 18.0);
        assert_eq!(items[1].answer, 1234.0);
    }
}
