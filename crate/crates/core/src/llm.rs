//! Task-plan disambiguation: build prompts from transcripts plus intent
//! tags and in-context examples, query a pluggable LLM transport (offline
//! mock or HTTP), parse the chosen plan, and score selection accuracy.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{InstructionParts, Interpretation, Label, UtteranceSample};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("in-context example leakage: {0}")]
    Leakage(String),
    #[error("prompt protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("llm configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

/// An object reference with optional spatial qualifiers, e.g.
/// `coke [beside pringles]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferentDescriptor {
    pub object: String,
    /// (relation, object) pairs; depth ≤ 2.
    pub qualifiers: Vec<(String, String)>,
}

impl ReferentDescriptor {
    pub fn plain(object: &str) -> Self {
        ReferentDescriptor {
            object: object.to_string(),
            qualifiers: Vec::new(),
        }
    }

    pub fn qualified(object: &str, relation: &str, other: &str) -> Self {
        ReferentDescriptor {
            object: object.to_string(),
            qualifiers: vec![(relation.to_string(), other.to_string())],
        }
    }

    fn render(&self) -> String {
        if self.qualifiers.is_empty() {
            self.object.clone()
        } else {
            let quals: Vec<String> = self
                .qualifiers
                .iter()
                .map(|(r, o)| format!("{r} {o}"))
                .collect();
            format!("{} [{}]", self.object, quals.join(", "))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStep {
    Pick(ReferentDescriptor),
    Place(ReferentDescriptor),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlanCandidate {
    pub plan_id: u8,
    pub steps: Vec<PlanStep>,
}

impl TaskPlanCandidate {
    fn render(&self) -> String {
        let steps: Vec<String> = self
            .steps
            .iter()
            .map(|s| match s {
                PlanStep::Pick(d) => format!("pick({})", d.render()),
                PlanStep::Place(d) => format!("place({})", d.render()),
            })
            .collect();
        format!("PLAN {}: {}", self.plan_id, steps.join(", "))
    }

    /// The objects the plan acts on directly, ignoring qualifiers.
    pub fn head_objects(&self) -> Vec<&str> {
        self.steps
            .iter()
            .map(|s| match s {
                PlanStep::Pick(d) | PlanStep::Place(d) => d.object.as_str(),
            })
            .collect()
    }
}

/// The two readings of "(verb) the (x) (rel) the (y) (rel2) the (z)":
/// plan 1 moves x to y (z locates y), plan 2 moves x (located by y) to z.
pub fn plans_for(parts: &InstructionParts) -> [TaskPlanCandidate; 2] {
    [
        TaskPlanCandidate {
            plan_id: 1,
            steps: vec![
                PlanStep::Pick(ReferentDescriptor::plain(&parts.x)),
                PlanStep::Place(ReferentDescriptor::qualified(&parts.y, &parts.rel2, &parts.z)),
            ],
        },
        TaskPlanCandidate {
            plan_id: 2,
            steps: vec![
                PlanStep::Pick(ReferentDescriptor::qualified(&parts.x, &parts.rel, &parts.y)),
                PlanStep::Place(ReferentDescriptor::plain(&parts.z)),
            ],
        },
    ]
}

/// One plan-selection problem: transcript, intent tags (predicted or gold),
/// the two candidate plans, and the gold plan id for scoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisambiguationQuery {
    pub id: String,
    pub instruction_id: u32,
    pub transcript: Vec<String>,
    pub intent_tags: Vec<Label>,
    pub candidates: [TaskPlanCandidate; 2],
    pub gold_plan: u8,
}

/// Build a query from a corpus sample, pairing the transcript with the
/// supplied tags (gold, predicted, or all-O).
pub fn query_from_sample(
    sample: &UtteranceSample,
    tags: Vec<Label>,
) -> Result<DisambiguationQuery, LlmError> {
    let transcript = sample.tokens();
    if tags.len() != transcript.len() {
        return Err(LlmError::Config(format!(
            "{} tags for {} words in sample {}",
            tags.len(),
            transcript.len(),
            sample.id
        )));
    }
    let parts = sample.parts().ok_or_else(|| {
        LlmError::Config(format!("sample {} is not template-shaped", sample.id))
    })?;
    Ok(DisambiguationQuery {
        id: sample.id.clone(),
        instruction_id: sample.instruction_id,
        transcript,
        intent_tags: tags,
        candidates: plans_for(&parts),
        gold_plan: match sample.interpretation {
            Interpretation::A => 1,
            Interpretation::B => 2,
        },
    })
}

fn tag_name(label: Label) -> &'static str {
    match label {
        Label::O => "O",
        Label::GOAL => "GOAL",
        Label::DETAIL => "DETAIL",
    }
}

fn render_tags(transcript: &[String], tags: &[Label]) -> String {
    transcript
        .iter()
        .zip(tags)
        .map(|(w, t)| format!("{w}/{}", tag_name(*t)))
        .collect::<Vec<_>>()
        .join(" ")
}

const PROMPT_HEADER: &str = "You select the correct task plan for a spoken robot instruction.\n\
Each word of the transcript carries an intent tag: GOAL marks the objects the\n\
robot must act on, DETAIL marks context that only locates another object, and\n\
O marks everything else. The correct plan acts directly on the GOAL objects.\n\
Reply with exactly one final line of the form: ANSWER: PLAN <1|2>.\n";

/// Deterministic prompt: header, worked examples, then the query. Example
/// instructions must be disjoint from the query's instruction.
pub fn build_prompt(
    query: &DisambiguationQuery,
    examples: &[DisambiguationQuery],
) -> Result<String, LlmError> {
    if examples.is_empty() {
        return Err(LlmError::Config("at least one in-context example required".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.instruction_id == query.instruction_id) {
        return Err(LlmError::Leakage(format!(
            "example {} shares instruction {} with query {}",
            e.id, e.instruction_id, query.id
        )));
    }
    let mut out = String::from(PROMPT_HEADER);
    for (k, e) in examples.iter().enumerate() {
        out.push_str(&format!("\nEXAMPLE {}\n", k + 1));
        out.push_str(&format!("TAGS: {}\n", render_tags(&e.transcript, &e.intent_tags)));
        out.push_str(&format!("{}\n{}\n", e.candidates[0].render(), e.candidates[1].render()));
        out.push_str(&format!("ANSWER: PLAN {}\n", e.gold_plan));
    }
    out.push_str("\nQUERY\n");
    out.push_str(&format!(
        "TAGS: {}\n",
        render_tags(&query.transcript, &query.intent_tags)
    ));
    out.push_str(&format!(
        "{}\n{}\n",
        query.candidates[0].render(),
        query.candidates[1].render()
    ));
    out.push_str("ANSWER:");
    Ok(out)
}

/// Extract the chosen plan from a response: the last `ANSWER:` line wins,
/// falling back to the last standalone 1/2 digit. `None` = unresolvable.
pub fn parse_choice(response: &str) -> Option<u8> {
    let answer_line = response
        .lines()
        .rev()
        .find(|l| l.trim().to_ascii_lowercase().starts_with("answer:"));
    if let Some(line) = answer_line {
        let lower = line.to_ascii_lowercase();
        if let Some(pos) = lower.rfind("plan") {
            for ch in lower[pos..].chars() {
                match ch {
                    '1' => return Some(1),
                    '2' => return Some(2),
                    _ => {}
                }
            }
        }
    }
    let mut last = None;
    let bytes: Vec<char> = response.chars().collect();
    for (i, &ch) in bytes.iter().enumerate() {
        if ch == '1' || ch == '2' {
            let prev_digit = i > 0 && bytes[i - 1].is_ascii_digit();
            let next_digit = i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
            if !prev_digit && !next_digit {
                last = Some(if ch == '1' { 1 } else { 2 });
            }
        }
    }
    last
}

fn head_objects_of_line(line: &str) -> Vec<String> {
    let mut heads = Vec::new();
    let mut rest = line;
    while let Some(open) = rest.find('(') {
        let tail = &rest[open + 1..];
        let end = tail
            .find(|c: char| c == ' ' || c == '[' || c == ')' || c == ',')
            .unwrap_or(tail.len());
        let head = tail[..end].trim();
        if !head.is_empty() {
            heads.push(head.to_string());
        }
        rest = tail;
    }
    heads
}

/// Offline stand-in for a language model. Rule: the plan whose pick/place
/// head objects cover more of the query's GOAL-tagged tokens wins; ties
/// (including tag-free prompts) fall back to PLAN 1.
pub fn mock_llm(prompt: &str) -> Result<String, LlmError> {
    let start = prompt
        .rfind("QUERY\n")
        .ok_or_else(|| LlmError::Protocol("prompt has no QUERY section".into()))?;
    let query = &prompt[start + "QUERY\n".len()..];
    let tags_line = query
        .lines()
        .find(|l| l.starts_with("TAGS:"))
        .ok_or_else(|| LlmError::Protocol("query has no TAGS line".into()))?;
    let goals: Vec<&str> = tags_line
        .trim_start_matches("TAGS:")
        .split_whitespace()
        .filter_map(|t| t.strip_suffix("/GOAL"))
        .collect();
    let plan_line = |id: u8| {
        query
            .lines()
            .find(|l| l.starts_with(&format!("PLAN {id}:")))
            .ok_or_else(|| LlmError::Protocol(format!("query has no PLAN {id} line")))
    };
    let coverage = |line: &str| {
        head_objects_of_line(line)
            .iter()
            .filter(|h| goals.iter().any(|g| g == h))
            .count()
    };
    let c1 = coverage(plan_line(1)?);
    let c2 = coverage(plan_line(2)?);
    let choice = if c2 > c1 { 2 } else { 1 };
    Ok(format!("ANSWER: PLAN {choice}"))
}

/// HTTP chat-completion transport settings. The credential is read from
/// `api_key_env` at call time and checked before any network traffic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_s: u64,
    pub max_retries: u32,
    pub max_concurrent: usize,
    pub api_key_env: String,
    /// Base backoff in milliseconds; doubles per retry.
    pub backoff_base_ms: u64,
}

impl HttpConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        HttpConfig {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            timeout_s: 60,
            max_retries: 3,
            max_concurrent: 4,
            api_key_env: "LLM_API_KEY".to_string(),
            backoff_base_ms: 1000,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Transport {
    Mock,
    Http(HttpConfig),
}

impl Transport {
    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        match self {
            Transport::Mock => mock_llm(prompt),
            Transport::Http(config) => http_llm(prompt, config),
        }
    }
}

/// POST a temperature-0 chat request, retrying transport/5xx failures with
/// exponential backoff.
pub fn http_llm(prompt: &str, config: &HttpConfig) -> Result<String, LlmError> {
    let key = std::env::var(&config.api_key_env).map_err(|_| {
        LlmError::Config(format!(
            "credential environment variable {} is not set",
            config.api_key_env
        ))
    })?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(config.timeout_s))
        .build()
        .map_err(|e| LlmError::Transport(e.to_string()))?;
    let body = serde_json::json!({
        "model": config.model,
        "messages": [
            {"role": "system", "content": "Follow the instructions exactly."},
            {"role": "user", "content": prompt},
        ],
        "temperature": 0,
    });
    let mut last_err = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 {
            let backoff = config.backoff_base_ms * (1u64 << (attempt - 1));
            std::thread::sleep(Duration::from_millis(backoff));
        }
        let sent = client
            .post(&config.endpoint)
            .bearer_auth(&key)
            .json(&body)
            .send();
        match sent {
            Ok(resp) => {
                let status = resp.status();
                if status.is_server_error() {
                    last_err = format!("server returned {status}");
                    continue;
                }
                if !status.is_success() {
                    return Err(LlmError::Transport(format!("server returned {status}")));
                }
                let value: serde_json::Value =
                    resp.json().map_err(|e| LlmError::Transport(e.to_string()))?;
                let content = value["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| {
                        LlmError::Transport("response has no choices[0].message.content".into())
                    })?;
                return Ok(content.to_string());
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(LlmError::Transport(format!(
        "exhausted {} retries: {last_err}",
        config.max_retries
    )))
}

/// Table-II reference points from the source experiments, kept for context
/// next to our numbers.
pub const PAPER_REFERENCE: &[(&str, f64)] = &[
    ("ASR", 0.50),
    ("Prosody-BiLSTM", 0.5684),
    ("Prosody-Transformer", 0.7196),
];

#[derive(Clone, Debug, Serialize)]
pub struct PlanEvalRow {
    pub query_id: String,
    pub instruction_id: u32,
    pub tagger: String,
    pub chosen: Option<u8>,
    pub gold: u8,
    pub correct: bool,
}

#[derive(Clone, Debug)]
pub struct PlanEvalResult {
    pub accuracy: f64,
    pub rows: Vec<PlanEvalRow>,
    /// instruction_id -> (correct, total).
    pub per_instruction: BTreeMap<u32, (usize, usize)>,
}

/// Score plan selection over a query set. Invalid responses count as
/// incorrect. HTTP transports run up to `max_concurrent` requests at once;
/// results keep query order.
pub fn eval_plan_selection(
    queries: &[DisambiguationQuery],
    examples: &[DisambiguationQuery],
    transport: &Transport,
    tagger_name: &str,
) -> Result<PlanEvalResult, LlmError> {
    if queries.is_empty() {
        return Err(LlmError::Config("no queries to evaluate".into()));
    }
    let prompts: Vec<String> = queries
        .iter()
        .map(|q| build_prompt(q, examples))
        .collect::<Result<_, _>>()?;
    let chunk = match transport {
        Transport::Http(c) => c.max_concurrent.max(1),
        Transport::Mock => 1,
    };
    let mut responses: Vec<Result<String, LlmError>> = Vec::with_capacity(prompts.len());
    for group in prompts.chunks(chunk) {
        if chunk == 1 || group.len() == 1 {
            for p in group {
                responses.push(transport.complete(p));
            }
        } else {
            let mut batch: Vec<Option<Result<String, LlmError>>> =
                (0..group.len()).map(|_| None).collect();
            std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|p| scope.spawn(move || transport.complete(p)))
                    .collect();
                for (slot, h) in batch.iter_mut().zip(handles) {
                    *slot = Some(h.join().expect("transport worker panicked"));
                }
            });
            responses.extend(batch.into_iter().map(|r| r.expect("filled")));
        }
    }
    let mut rows = Vec::with_capacity(queries.len());
    let mut per_instruction: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut correct_total = 0usize;
    for (q, resp) in queries.iter().zip(responses) {
        let chosen = match resp {
            Ok(text) => parse_choice(&text),
            Err(LlmError::Transport(e)) => return Err(LlmError::Transport(e)),
            Err(other) => return Err(other),
        };
        let correct = chosen == Some(q.gold_plan);
        let slot = per_instruction.entry(q.instruction_id).or_insert((0, 0));
        slot.1 += 1;
        if correct {
            slot.0 += 1;
            correct_total += 1;
        }
        rows.push(PlanEvalRow {
            query_id: q.id.clone(),
            instruction_id: q.instruction_id,
            tagger: tagger_name.to_string(),
            chosen,
            gold: q.gold_plan,
            correct,
        });
    }
    Ok(PlanEvalResult {
        accuracy: correct_total as f64 / queries.len() as f64,
        rows,
        per_instruction,
    })
}

pub fn write_plan_csv(result: &PlanEvalResult, path: &Path) -> Result<(), LlmError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LlmError::Io(e.to_string()))?;
    w.write_record(["query_id", "instruction_id", "tagger", "chosen", "gold", "correct"])
        .map_err(|e| LlmError::Io(e.to_string()))?;
    for r in &result.rows {
        w.write_record([
            r.query_id.clone(),
            r.instruction_id.to_string(),
            r.tagger.clone(),
            r.chosen.map(|c| c.to_string()).unwrap_or_else(|| "invalid".into()),
            r.gold.to_string(),
            r.correct.to_string(),
        ])
        .map_err(|e| LlmError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| LlmError::Io(e.to_string()))
}
