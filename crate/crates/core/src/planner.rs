//! Hierarchical block plans: schema, occlusion layering, validation, LLM
//! synthesis and ordering metrics.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::wire::{self, JsonClient, RetryPolicy, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    pub attribute_text: String,
    /// Alternative spelling used in `attribute_text` when `name` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl PartSpec {
    pub fn new(name: impl Into<String>, attribute_text: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            attribute_text: attribute_text.into(),
            alias: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub index: usize,
    pub initial_text: String,
    pub parts: Vec<PartSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    pub source_prompt: String,
    pub blocks: Vec<Block>,
    /// `(inner, outer)`: `outer` covers `inner` from typical viewpoints.
    pub occlusion_edges: Vec<(String, String)>,
}

impl Plan {
    pub fn parts(&self) -> impl Iterator<Item = &PartSpec> {
        self.blocks.iter().flat_map(|b| b.parts.iter())
    }

    /// Block index of every part; the first occurrence wins for duplicates.
    pub fn block_of(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for b in &self.blocks {
            for p in &b.parts {
                m.entry(p.name.as_str()).or_insert(b.index);
            }
        }
        m
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyPartName { block: usize },
    DuplicatePart { part: String, first_block: usize, second_block: usize },
    EmptyBlock { block: usize },
    BlockIndexMismatch { position: usize, index: usize },
    UnknownPart { part: String },
    Order { inner: String, outer: String, inner_block: usize, outer_block: usize },
    SameBlockEdge { inner: String, outer: String, block: usize },
    Cycle { parts: Vec<String> },
    InitialTextMissingPart { block: usize, part: String },
    NameNotInAttributeText { part: String, attribute_text: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPartName { block } => write!(f, "block {block} has a part with an empty name"),
            Violation::DuplicatePart { part, first_block, second_block } => {
                write!(f, "part `{part}` appears in blocks {first_block} and {second_block}")
            }
            Violation::EmptyBlock { block } => write!(f, "block {block} has no parts"),
            Violation::BlockIndexMismatch { position, index } => {
                write!(f, "block at position {position} has index {index}")
            }
            Violation::UnknownPart { part } => write!(f, "occlusion edge names unknown part `{part}`"),
            Violation::Order { inner, outer, inner_block, outer_block } => write!(
                f,
                "edge ({inner}, {outer}) needs block({inner}) < block({outer}), got {inner_block} ≥ {outer_block}"
            ),
            Violation::SameBlockEdge { inner, outer, block } => {
                write!(f, "parts `{inner}` and `{outer}` share block {block} but have an occlusion edge")
            }
            Violation::Cycle { parts } => write!(f, "occlusion cycle: {}", parts.join(" → ")),
            Violation::InitialTextMissingPart { block, part } => {
                write!(f, "initial text of block {block} does not mention `{part}`")
            }
            Violation::NameNotInAttributeText { part, attribute_text } => {
                write!(f, "part `{part}` does not occur in its attribute text `{attribute_text}`")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("occlusion cycle: {}", .0.join(" → "))]
    Cycle(Vec<String>),
    #[error("occlusion edge names unknown part `{0}`")]
    UnknownPart(String),
    #[error("duplicate part `{0}`")]
    DuplicatePart(String),
    #[error("invalid plan:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error("cannot parse plan JSON: {message}; reply excerpt: {excerpt}")]
    Parse { message: String, excerpt: String },
    #[error("plan file {path}: {message}")]
    Io { path: String, message: String },
    #[error("part sets differ: {0}")]
    PartSetMismatch(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

fn mentions(text: &str, needle: &str) -> bool {
    text.to_lowercase().contains(&needle.to_lowercase())
}

/// Finds one cycle among `nodes` restricted to `adj`, as a closed walk.
fn find_cycle(names: &[&str], adj: &[Vec<usize>], alive: &[bool]) -> Vec<String> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; names.len()];
    let mut stack: Vec<usize> = Vec::new();
    fn dfs(u: usize, adj: &[Vec<usize>], alive: &[bool], state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[u] = 1;
        stack.push(u);
        for &v in &adj[u] {
            if !alive[v] {
                continue;
            }
            if state[v] == 1 {
                let pos = stack.iter().position(|&x| x == v).expect("on stack");
                let mut cyc = stack[pos..].to_vec();
                cyc.push(v);
                return Some(cyc);
            }
            if state[v] == 0 {
                if let Some(c) = dfs(v, adj, alive, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[u] = 2;
        None
    }
    for s in 0..names.len() {
        if alive[s] && state[s] == 0 {
            if let Some(c) = dfs(s, adj, alive, &mut state, &mut stack) {
                return c.into_iter().map(|i| names[i].to_string()).collect();
            }
        }
    }
    Vec::new()
}

/// Longest-path depth of each part: `depth(p)` is the length of the longest
/// occlusion chain ending at `p`.
pub fn layer_depths(names: &[&str], edges: &[(String, String)]) -> Result<Vec<usize>, PlanError> {
    let mut index = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if index.insert(*n, i).is_some() {
            return Err(PlanError::DuplicatePart(n.to_string()));
        }
    }
    let n = names.len();
    let mut adj = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (a, b) in edges {
        let ia = *index.get(a.as_str()).ok_or_else(|| PlanError::UnknownPart(a.clone()))?;
        let ib = *index.get(b.as_str()).ok_or_else(|| PlanError::UnknownPart(b.clone()))?;
        adj[ia].push(ib);
        indeg[ib] += 1;
    }
    let mut depth = vec![0usize; n];
    let mut queue: std::collections::VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut done = 0;
    while let Some(u) = queue.pop_front() {
        done += 1;
        for &v in &adj[u] {
            depth[v] = depth[v].max(depth[u] + 1);
            indeg[v] -= 1;
            if indeg[v] == 0 {
                queue.push_back(v);
            }
        }
    }
    if done < n {
        let alive: Vec<bool> = indeg.iter().map(|&d| d > 0).collect();
        return Err(PlanError::Cycle(find_cycle(names, &adj, &alive)));
    }
    Ok(depth)
}

/// Joins part names as `a, b and c`.
pub fn default_initial_text(parts: &[PartSpec]) -> String {
    let names: Vec<&str> = parts.iter().map(|p| p.name.as_str()).collect();
    match names.as_slice() {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Groups parts into blocks by longest-path depth, keeping input order
/// within each block. Initial texts are synthesized from part names.
pub fn layer(parts: &[PartSpec], edges: &[(String, String)]) -> Result<Vec<Block>, PlanError> {
    let names: Vec<&str> = parts.iter().map(|p| p.name.as_str()).collect();
    let depth = layer_depths(&names, edges)?;
    let count = depth.iter().max().map_or(0, |d| d + 1);
    let mut blocks: Vec<Block> = (0..count)
        .map(|index| Block {
            index,
            initial_text: String::new(),
            parts: Vec::new(),
        })
        .collect();
    for (p, &d) in parts.iter().zip(&depth) {
        blocks[d].parts.push(p.clone());
    }
    for b in &mut blocks {
        b.initial_text = default_initial_text(&b.parts);
    }
    Ok(blocks)
}

/// Checks every plan invariant and lists all violations found.
pub fn validate(plan: &Plan) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (pos, b) in plan.blocks.iter().enumerate() {
        if b.index != pos {
            v.push(Violation::BlockIndexMismatch { position: pos, index: b.index });
        }
        if b.parts.is_empty() {
            v.push(Violation::EmptyBlock { block: b.index });
        }
        for p in &b.parts {
            if p.name.trim().is_empty() {
                v.push(Violation::EmptyPartName { block: b.index });
                continue;
            }
            if let Some(&first) = seen.get(p.name.as_str()) {
                v.push(Violation::DuplicatePart {
                    part: p.name.clone(),
                    first_block: first,
                    second_block: b.index,
                });
            } else {
                seen.insert(&p.name, b.index);
            }
            let in_attr = mentions(&p.attribute_text, &p.name)
                || p.alias.as_deref().is_some_and(|a| mentions(&p.attribute_text, a));
            if !in_attr {
                v.push(Violation::NameNotInAttributeText {
                    part: p.name.clone(),
                    attribute_text: p.attribute_text.clone(),
                });
            }
            let in_initial = mentions(&b.initial_text, &p.name)
                || p.alias.as_deref().is_some_and(|a| mentions(&b.initial_text, a));
            if !in_initial {
                v.push(Violation::InitialTextMissingPart {
                    block: b.index,
                    part: p.name.clone(),
                });
            }
        }
    }
    let mut edges_known = true;
    for (inner, outer) in &plan.occlusion_edges {
        for name in [inner, outer] {
            if !seen.contains_key(name.as_str()) {
                v.push(Violation::UnknownPart { part: name.clone() });
                edges_known = false;
            }
        }
        let (Some(&bi), Some(&bo)) = (seen.get(inner.as_str()), seen.get(outer.as_str())) else {
            continue;
        };
        if bi == bo {
            v.push(Violation::SameBlockEdge {
                inner: inner.clone(),
                outer: outer.clone(),
                block: bi,
            });
        } else if bi > bo {
            v.push(Violation::Order {
                inner: inner.clone(),
                outer: outer.clone(),
                inner_block: bi,
                outer_block: bo,
            });
        }
    }
    if edges_known {
        let mut names: Vec<&str> = Vec::new();
        for p in plan.parts() {
            if !names.contains(&p.name.as_str()) {
                names.push(&p.name);
            }
        }
        if let Err(PlanError::Cycle(parts)) = layer_depths(&names, &plan.occlusion_edges) {
            v.push(Violation::Cycle { parts });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Recomputes block membership from the occlusion edges. Initial texts are
/// kept from any original block whose text mentions every part of the new
/// block, and synthesized otherwise.
pub fn repair(plan: &Plan) -> Result<Plan, PlanError> {
    let mut parts: Vec<PartSpec> = Vec::new();
    for p in plan.parts() {
        if parts.iter().any(|q| q.name == p.name) {
            return Err(PlanError::DuplicatePart(p.name.clone()));
        }
        parts.push(p.clone());
    }
    let mut blocks = layer(&parts, &plan.occlusion_edges)?;
    for b in &mut blocks {
        let reuse = plan.blocks.iter().find(|orig| {
            b.parts.iter().all(|p| {
                mentions(&orig.initial_text, &p.name)
                    || p.alias.as_deref().is_some_and(|a| mentions(&orig.initial_text, a))
            })
        });
        if let Some(orig) = reuse {
            b.initial_text = orig.initial_text.clone();
        }
    }
    let out = Plan {
        source_prompt: plan.source_prompt.clone(),
        blocks,
        occlusion_edges: plan.occlusion_edges.clone(),
    };
    validate(&out).map_err(PlanError::Invalid)?;
    Ok(out)
}

/// Parses a plan from strict JSON. A surrounding Markdown code fence is
/// tolerated.
pub fn parse_plan(text: &str) -> Result<Plan, PlanError> {
    let mut t = text.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        t = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    serde_json::from_str(t).map_err(|e| PlanError::Parse {
        message: e.to_string(),
        excerpt: wire::excerpt(text),
    })
}

pub fn load_plan_file(path: &Path) -> Result<Plan, PlanError> {
    let text = std::fs::read_to_string(path).map_err(|e| PlanError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let plan = parse_plan(&text)?;
    validate(&plan).map_err(PlanError::Invalid)?;
    Ok(plan)
}

pub const SYSTEM_PROMPT: &str = r#"You decompose a complex text description of a 3D object into a sequence of shorter texts for part-by-part generation.

Generation order is in-n-out: parts that are most occluded (inner) are generated first and parts that are least occluded (outer) last. List every part of the object, give each part an attribute text that names the part with its attributes, and list occlusion edges ["inner", "outer"] meaning the outer part covers the inner part from typical viewpoints. Group parts that do not occlude one another into the same block. Each block has an initial text that describes the object with only the parts of that block and no attributes.

Reply with a single JSON object and nothing else, using this schema:
{"source_prompt": str, "blocks": [{"index": int, "initial_text": str, "parts": [{"name": str, "attribute_text": str}]}], "occlusion_edges": [["inner", "outer"]]}

Example input: A man in a yellow shirt, pink trousers, blue leather shoes and a black coat is waving
Example output:
{"source_prompt": "A man in a yellow shirt, pink trousers, blue leather shoes and a black coat is waving", "blocks": [{"index": 0, "initial_text": "A man in a shirt, shoes and trousers is waving", "parts": [{"name": "shirt", "attribute_text": "yellow shirt"}, {"name": "trousers", "attribute_text": "pink trousers"}, {"name": "shoes", "attribute_text": "blue leather shoes"}]}, {"index": 1, "initial_text": "A man in coat is waving", "parts": [{"name": "coat", "attribute_text": "black coat"}]}], "occlusion_edges": [["shirt", "coat"], ["trousers", "coat"]]}"#;

/// Chat-completions client posting to `{endpoint}/v1/chat/completions`.
#[derive(Debug, Clone)]
pub struct LlmClient {
    endpoint: String,
    model: Option<String>,
    client: JsonClient,
}

pub fn llm_request_body(model: Option<&str>, prompt: &str) -> Vec<u8> {
    #[derive(Serialize)]
    struct Body<'a> {
        #[serde(skip_serializing_if = "Option::is_none")]
        model: Option<&'a str>,
        messages: serde_json::Value,
        temperature: u8,
    }
    serde_json::to_vec(&Body {
        model,
        messages: json!([
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": prompt},
        ]),
        temperature: 0,
    })
    .expect("serializable")
}

/// `choices[0].message.content` of a chat-completions reply.
pub fn parse_llm_response(value: &serde_json::Value) -> Result<String, WireError> {
    let choices = value
        .get("choices")
        .ok_or_else(|| WireError::schema("choices", "missing"))?
        .as_array()
        .ok_or_else(|| WireError::schema("choices", "not an array"))?;
    let first = choices.first().ok_or_else(|| WireError::schema("choices", "empty"))?;
    let msg = first
        .get("message")
        .ok_or_else(|| WireError::schema("choices[0].message", "missing"))?;
    msg.get("content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| WireError::schema("choices[0].message.content", "missing or not a string"))
}

impl LlmClient {
    pub fn new(endpoint: impl Into<String>, model: Option<String>, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model,
            client: JsonClient::new(retry),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint)
    }

    pub fn complete(&self, prompt: &str) -> Result<String, WireError> {
        let body = llm_request_body(self.model.as_deref(), prompt);
        let reply = self.client.post(&self.url(), &body)?;
        parse_llm_response(&reply)
    }
}

pub enum PlanSource<'a> {
    Llm(&'a LlmClient),
    File(&'a Path),
}

/// Produces a valid plan from an LLM or a plan file. LLM replies are
/// re-layered from their own occlusion edges before validation.
pub fn synthesize_plan(prompt: &str, source: PlanSource) -> Result<Plan, PlanError> {
    match source {
        PlanSource::File(path) => load_plan_file(path),
        PlanSource::Llm(client) => {
            let reply = client.complete(prompt)?;
            let mut plan = parse_plan(&reply)?;
            plan.source_prompt = prompt.to_string();
            repair(&plan)
        }
    }
}

/// Ordered part pairs `(a, b)` with `block(a) < block(b)` in `reference`
/// but `block(a) > block(b)` in `candidate`.
pub fn inversions(candidate: &Plan, reference: &Plan) -> Result<u64, PlanError> {
    let cand = candidate.block_of();
    let refb = reference.block_of();
    let cset: BTreeSet<&str> = cand.keys().copied().collect();
    let rset: BTreeSet<&str> = refb.keys().copied().collect();
    if cset != rset {
        let diff: Vec<&str> = cset.symmetric_difference(&rset).copied().collect();
        return Err(PlanError::PartSetMismatch(diff.join(", ")));
    }
    let mut items: Vec<(usize, usize)> = rset.iter().map(|n| (refb[n], cand[n])).collect();
    items.sort();
    let max_c = items.iter().map(|x| x.1).max().unwrap_or(0);
    // Fenwick tree over candidate block indices of already-inserted parts.
    let mut tree = vec![0u64; max_c + 2];
    let add = |tree: &mut Vec<u64>, i: usize| {
        let mut i = i + 1;
        while i < tree.len() {
            tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    };
    let prefix = |tree: &Vec<u64>, i: usize| {
        let mut i = i + 1;
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    };
    let mut total = 0u64;
    let mut inserted = 0u64;
    let mut g = 0;
    while g < items.len() {
        let mut e = g;
        while e < items.len() && items[e].0 == items[g].0 {
            e += 1;
        }
        for &(_, c) in &items[g..e] {
            total += inserted - prefix(&tree, c);
        }
        for &(_, c) in &items[g..e] {
            add(&mut tree, c);
            inserted += 1;
        }
        g = e;
    }
    Ok(total)
}

/// Parts and edges of the waving-man example.
pub fn teaser_parts() -> (Vec<PartSpec>, Vec<(String, String)>) {
    (
        vec![
            PartSpec::new("shirt", "yellow shirt"),
            PartSpec::new("trousers", "pink trousers"),
            PartSpec::new("shoes", "blue leather shoes"),
            PartSpec::new("coat", "black coat"),
        ],
        vec![
            ("shirt".into(), "coat".into()),
            ("trousers".into(), "coat".into()),
        ],
    )
}

/// Reference plan for the waving-man example.
pub fn teaser_plan() -> Plan {
    let (parts, edges) = teaser_parts();
    let mut blocks = layer(&parts, &edges).expect("teaser edges are acyclic");
    blocks[0].initial_text = "A man in a shirt, shoes and trousers is waving".into();
    blocks[1].initial_text = "A man in coat is waving".into();
    Plan {
        source_prompt: "A man in a yellow shirt, pink trousers, blue leather shoes and a black coat is waving".into(),
        blocks,
        occlusion_edges: edges,
    }
}
