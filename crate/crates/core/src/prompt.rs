//! Prompt engine: context combinations, attention-weighted prompt syntax, and
//! LLM-backed prompt rewriting with a label-safe fallback.
//!
//! Prompts are comma-separated terms. A term may carry an attention weight
//! written as `(term:1.4)`; unweighted terms have weight `1.0` and are written
//! bare. Only flat groups are accepted.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::Rewriter;
use crate::error::{Error, Result};
use crate::model::{derive_id, Assignment, ContextCombination, ContextGrammar, PromptRecord, PromptSource, CATEGORY};

/// Attention weight stored in hundredths, so `1.4` is exact. Valid range `(0, 10]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttentionWeight(u32);

impl AttentionWeight {
    pub const ONE: AttentionWeight = AttentionWeight(100);
    const MAX_HUNDREDTHS: u32 = 1000;

    pub fn from_hundredths(h: u32) -> Result<Self> {
        if h == 0 || h > Self::MAX_HUNDREDTHS {
            return Err(Error::validation("weight", format!("weight {} outside (0, 10]", h as f64 / 100.0)));
        }
        Ok(AttentionWeight(h))
    }

    /// Converts a float, which must be a multiple of 0.01 within 1e-9.
    pub fn from_f64(w: f64) -> Result<Self> {
        let scaled = w * 100.0;
        let rounded = scaled.round();
        if !w.is_finite() || (scaled - rounded).abs() > 1e-9 * scaled.abs().max(1.0) {
            return Err(Error::validation("weight", format!("weight {w} is not a multiple of 0.01")));
        }
        if rounded <= 0.0 || rounded > Self::MAX_HUNDREDTHS as f64 {
            return Err(Error::validation("weight", format!("weight {w} outside (0, 10]")));
        }
        Ok(AttentionWeight(rounded as u32))
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 100.0
    }

    pub fn is_one(self) -> bool {
        self == Self::ONE
    }
}

impl fmt::Display for AttentionWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / 100;
        let frac = self.0 % 100;
        if frac == 0 {
            write!(f, "{int}")
        } else if frac % 10 == 0 {
            write!(f, "{int}.{}", frac / 10)
        } else {
            write!(f, "{int}.{frac:02}")
        }
    }
}

impl Serialize for AttentionWeight {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for AttentionWeight {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = f64::deserialize(d)?;
        AttentionWeight::from_f64(w).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightedTerm {
    pub term: String,
    pub weight: AttentionWeight,
}

impl WeightedTerm {
    pub fn plain(term: impl Into<String>) -> Self {
        WeightedTerm {
            term: term.into(),
            weight: AttentionWeight::ONE,
        }
    }

    pub fn weighted(term: impl Into<String>, weight: f64) -> Result<Self> {
        Ok(WeightedTerm {
            term: term.into(),
            weight: AttentionWeight::from_f64(weight)?,
        })
    }
}

/// A term must be trimmed, non-empty, and free of the separator and grouping characters.
pub fn validate_term(term: &str) -> Result<()> {
    if term.is_empty() {
        return Err(Error::validation("term", "terms must be non-empty"));
    }
    if term.trim() != term {
        return Err(Error::validation("term", format!("term `{term}` has surrounding whitespace")));
    }
    if let Some(c) = term.chars().find(|c| matches!(c, ',' | '(' | ')')) {
        return Err(Error::validation("term", format!("term `{term}` contains reserved character `{c}`")));
    }
    Ok(())
}

fn parse_error(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses a decimal with at most two fraction digits into hundredths.
fn parse_weight(text: &str, offset: usize) -> Result<AttentionWeight> {
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    let valid = !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.bytes().all(|b| b.is_ascii_digit())
        && !(text.contains('.') && frac.is_empty())
        && frac.len() <= 2;
    if !valid {
        return Err(parse_error(offset, format!("invalid weight `{text}`")));
    }
    let int: u64 = int.parse().map_err(|_| parse_error(offset, format!("weight `{text}` overflows")))?;
    let frac_h: u64 = match frac.len() {
        0 => 0,
        1 => frac.parse::<u64>().unwrap() * 10,
        _ => frac.parse::<u64>().unwrap(),
    };
    let hundredths = int.saturating_mul(100).saturating_add(frac_h);
    if hundredths == 0 {
        return Err(parse_error(offset, "weight must be positive"));
    }
    if hundredths > AttentionWeight::MAX_HUNDREDTHS as u64 {
        return Err(parse_error(offset, format!("weight `{text}` exceeds 10")));
    }
    Ok(AttentionWeight(hundredths as u32))
}

/// Parses prompt text into weighted terms. Offsets in errors count characters.
pub fn parse_prompt(text: &str) -> Result<Vec<WeightedTerm>> {
    let chars: Vec<char> = text.chars().collect();
    let mut segments: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    let mut open_at: Option<usize> = None;
    for (i, &c) in chars.iter().enumerate() {
        match c {
            '(' => {
                if open_at.is_some() {
                    return Err(parse_error(i, "nested attention groups are not supported"));
                }
                open_at = Some(i);
            }
            ')' => {
                if open_at.take().is_none() {
                    return Err(parse_error(i, "unbalanced `)`"));
                }
            }
            ',' if open_at.is_none() => {
                segments.push((start, i));
                start = i + 1;
            }
            _ => {}
        }
    }
    if let Some(i) = open_at {
        return Err(parse_error(i, "unbalanced `(`"));
    }
    segments.push((start, chars.len()));

    let mut terms = Vec::new();
    for (s, e) in segments {
        let seg = &chars[s..e];
        let lead = seg.iter().take_while(|c| c.is_whitespace()).count();
        let trail = seg.iter().rev().take_while(|c| c.is_whitespace()).count();
        if lead == seg.len() {
            continue;
        }
        let body = &seg[lead..seg.len() - trail];
        let body_start = s + lead;
        let has_group = body.iter().any(|&c| c == '(' || c == ')');
        if !has_group {
            terms.push(WeightedTerm::plain(body.iter().collect::<String>()));
            continue;
        }
        if body[0] != '(' || *body.last().unwrap() != ')' {
            let at = body.iter().position(|&c| c == '(' || c == ')').unwrap();
            return Err(parse_error(body_start + at, "attention group must span the whole term"));
        }
        let inner = &body[1..body.len() - 1];
        let colon = inner
            .iter()
            .rposition(|&c| c == ':')
            .ok_or_else(|| parse_error(body_start, "attention group without `:weight`"))?;
        if let Some(comma) = inner[..colon].iter().position(|&c| c == ',') {
            return Err(parse_error(body_start + 1 + comma, "comma inside attention group"));
        }
        let term: String = inner[..colon].iter().collect::<String>().trim().to_string();
        if term.is_empty() {
            return Err(parse_error(body_start + 1, "empty term in attention group"));
        }
        let weight_text: String = inner[colon + 1..].iter().collect();
        let lead_w = weight_text.chars().take_while(|c| c.is_whitespace()).count();
        let weight = parse_weight(weight_text.trim(), body_start + 2 + colon + lead_w)?;
        terms.push(WeightedTerm { term, weight });
    }
    Ok(terms)
}

/// Writes terms as prompt text: weight-1 terms bare, others `(term:w)`, joined by `", "`.
pub fn serialize_prompt(terms: &[WeightedTerm]) -> Result<String> {
    let mut parts = Vec::with_capacity(terms.len());
    for t in terms {
        validate_term(&t.term)?;
        AttentionWeight::from_hundredths(t.weight.0)?;
        if t.weight.is_one() {
            parts.push(t.term.clone());
        } else {
            parts.push(format!("({}:{})", t.term, t.weight));
        }
    }
    Ok(parts.join(", "))
}

/// Cartesian product of the grammar's options. The leftmost context varies slowest.
pub fn enumerate_combinations(grammar: &ContextGrammar) -> Result<Vec<ContextCombination>> {
    grammar.validate()?;
    let sizes: Vec<usize> = grammar.contexts.iter().map(|c| c.options.len()).collect();
    let total: usize = sizes.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; sizes.len()];
    for _ in 0..total {
        let assignments: Vec<Assignment> = grammar
            .contexts
            .iter()
            .zip(&idx)
            .map(|(ctx, &i)| Assignment {
                context: ctx.name.clone(),
                option: ctx.options[i].clone(),
            })
            .collect();
        let class_label = assignments
            .iter()
            .find(|a| a.context == CATEGORY)
            .map(|a| a.option.clone())
            .expect("validated grammar has a category");
        out.push(ContextCombination { assignments, class_label });
        for pos in (0..idx.len()).rev() {
            idx[pos] += 1;
            if idx[pos] < sizes[pos] {
                break;
            }
            idx[pos] = 0;
        }
    }
    Ok(out)
}

pub fn simplistic_terms(combination: &ContextCombination) -> Vec<WeightedTerm> {
    combination.options().map(WeightedTerm::plain).collect()
}

/// Comma-joined option keywords in assignment order, without weights.
pub fn render_simplistic_prompt(combination: &ContextCombination) -> String {
    combination.options().collect::<Vec<_>>().join(", ")
}

/// Quality terms appended to the fallback prompt.
pub const QUALITY_SUFFIX: [&str; 2] = ["4K UHD image", "Photorealistic"];

pub const DEFAULT_TEMPLATE_ID: &str = "air-v1";
pub const DEFAULT_MAX_TERMS: usize = 16;

/// In-context instruction given to the rewriting model.
#[derive(Debug)]
pub struct InstructionTemplate {
    pub id: &'static str,
    pub system: &'static str,
    /// Few-shot pairs: ordered keywords and the finished prompt.
    pub examples: &'static [(&'static [&'static str], &'static str)],
}

static TEMPLATES: [InstructionTemplate; 1] = [InstructionTemplate {
    id: DEFAULT_TEMPLATE_ID,
    system: "You write prompts for a text-to-image model. You receive context keywords ordered from most to least \
             important. Write a single comma-separated prompt in English that uses every keyword verbatim, mentions \
             more important keywords earlier, emphasises a few terms with the attention syntax (term:weight) where \
             weight has at most two decimals, and ends with image quality tags. Use at most {max_terms} \
             comma-separated terms and reply with the prompt only.",
    examples: &[
        (
            &["small fire and smoke", "tropical forest", "drone's view", "morning"],
            "A captivating drone's view of a tropical forest at dawn, with a medium-intensity fire burning amidst the \
             lush greenery, (dramatic:1.4), (serene:1.2), (vivid:1.3), (medium-intensity fire:1.4), 4K UHD image, \
             Photorealistic, Intricate details",
        ),
        (
            &["small fire and smoke", "boreal forest", "drone's view", "morning"],
            "A mesmerizing aerial perspective of a boreal forest at sunrise, featuring a moderately intense fire \
             blazing amidst the vibrant foliage, (captivating:1.4), (serense:1.3), 4K UHD image, Cinematic, Realistic",
        ),
    ],
}];

pub fn template(id: &str) -> Option<&'static InstructionTemplate> {
    TEMPLATES.iter().find(|t| t.id == id)
}

impl InstructionTemplate {
    /// Full instruction text sent to the rewriting model.
    pub fn render(&self, request: &RewriteRequest) -> String {
        let mut out = self.system.replace("{max_terms}", &request.max_terms.to_string());
        out.push_str("\n\n");
        for (keywords, prompt) in self.examples {
            out.push_str("Keywords: ");
            out.push_str(&keywords.join("; "));
            out.push_str("\nPrompt: ");
            out.push_str(prompt);
            out.push_str("\n\n");
        }
        out.push_str("Keywords: ");
        out.push_str(&request.combination.options().collect::<Vec<_>>().join("; "));
        out.push_str("\nPrompt:");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub combination: ContextCombination,
    pub instruction_template_id: String,
    pub max_terms: usize,
}

impl RewriteRequest {
    pub fn new(combination: ContextCombination) -> Self {
        RewriteRequest {
            combination,
            instruction_template_id: DEFAULT_TEMPLATE_ID.to_string(),
            max_terms: DEFAULT_MAX_TERMS,
        }
    }

    pub fn validate(&self) -> Result<&'static InstructionTemplate> {
        self.combination.validate()?;
        if self.max_terms == 0 {
            return Err(Error::validation("max_terms", "must be positive"));
        }
        template(&self.instruction_template_id).ok_or_else(|| {
            Error::validation(
                "instruction_template_id",
                format!("unknown template `{}`", self.instruction_template_id),
            )
        })
    }
}

pub fn prompt_id_for(combination: &ContextCombination) -> String {
    let mut parts: Vec<&[u8]> = vec![b"combination"];
    for a in &combination.assignments {
        parts.push(a.context.as_bytes());
        parts.push(a.option.as_bytes());
    }
    derive_id("p", &parts)
}

/// Checks a rewriter candidate: it parses, keeps every keyword, uses at least
/// one non-unit weight, and stays within `max_terms`.
pub fn check_candidate(text: &str, request: &RewriteRequest) -> std::result::Result<Vec<WeightedTerm>, String> {
    let terms = parse_prompt(text).map_err(|e| e.to_string())?;
    if terms.is_empty() {
        return Err("empty prompt".into());
    }
    if terms.len() > request.max_terms {
        return Err(format!("{} terms exceed the limit of {}", terms.len(), request.max_terms));
    }
    for keyword in request.combination.options() {
        if !terms.iter().any(|t| t.term.contains(keyword)) {
            return Err(format!("keyword `{keyword}` missing"));
        }
    }
    if terms.iter().all(|t| t.weight.is_one()) {
        return Err("no attention-weighted term".into());
    }
    Ok(terms)
}

/// Rewrites a combination into an engineered prompt.
///
/// A candidate failing [`check_candidate`] is retried once; a second failure
/// falls back to the simplistic keywords plus [`QUALITY_SUFFIX`], with
/// `source = simplistic`. Backend errors are returned as-is.
pub fn engineer_prompt(request: &RewriteRequest, rewriter: &dyn Rewriter) -> Result<PromptRecord> {
    request.validate()?;
    let id = prompt_id_for(&request.combination);
    for attempt in 0..2 {
        let candidate = rewriter.rewrite(request)?;
        match check_candidate(&candidate, request) {
            Ok(terms) => {
                return Ok(PromptRecord {
                    id,
                    terms,
                    source: PromptSource::Engineered,
                    combination: Some(request.combination.clone()),
                    class_label: request.combination.class_label.clone(),
                })
            }
            Err(reason) => log::warn!("rewriter candidate rejected (attempt {}): {reason}", attempt + 1),
        }
    }
    let mut terms = simplistic_terms(&request.combination);
    terms.extend(QUALITY_SUFFIX.iter().map(|s| WeightedTerm::plain(*s)));
    Ok(PromptRecord {
        id,
        terms,
        source: PromptSource::Simplistic,
        combination: Some(request.combination.clone()),
        class_label: request.combination.class_label.clone(),
    })
}

/// The ablation baseline: raw keywords, no rewriting.
pub fn simplistic_prompt(combination: &ContextCombination) -> PromptRecord {
    PromptRecord {
        id: prompt_id_for(combination),
        terms: simplistic_terms(combination),
        source: PromptSource::Simplistic,
        combination: Some(combination.clone()),
        class_label: combination.class_label.clone(),
    }
}
