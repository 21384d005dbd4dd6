//! Plain-text instance files: finite multi-round protocols with explicit
//! probability tables, a privacy budget, a halting rule, and named adversary
//! strategies.
//!
//! Grammar (line oriented, `#` starts a comment, blank lines ignored):
//!
//! ```text
//! databases x xp                    # database names
//! neighbours x-xp                   # unordered neighbour pairs, name-name
//! budget epsilon=4.0 delta=0.12
//! filter look-ahead delta_tilde=0.012 theta=0.018
//! # or: filter naive
//! outputs quiet reveal-x reveal-xp  # global output symbols
//! rounds 6                          # number of real rounds
//!
//! round 1..6                        # single index or inclusive range
//!   requests query skip
//!   query @ x: quiet:0.99 reveal-x:0.01
//!   query @ xp: quiet:0.99 reveal-xp:0.01
//!   skip @ x: quiet:1
//!   skip @ xp: quiet:1
//!
//! strategy always-query fixed query
//! strategy back-off reactive base=query trigger=reveal-x after=skip
//! ```
//!
//! Distribution rows may condition on the previous round's released output
//! by inserting `| prev=NAME` before the colon, with `prev=start` keying the
//! opening round. Within one round block either every row conditions or none
//! does, and conditioned blocks must cover every previous output reachable
//! at their rounds. Outputs missing from a row carry probability zero, and
//! each row must sum to one. A fixed strategy shorter than the horizon
//! repeats its last request.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::domain::{
    AdversaryStrategy, DatabaseSpace, DpError, FixedStrategy, Instance, Output, PrivacyBudget,
    ReactiveStrategy, Request, Result, RoundSpec, Transcript,
};
use crate::gaussian::FilterParams;
use crate::mechanisms::DiscreteTableMechanism;
use crate::realisation::HaltPolicy;

/// A named adversary strategy declared by an instance file.
#[derive(Clone)]
pub struct NamedStrategy {
    pub name: String,
    pub strategy: Arc<dyn AdversaryStrategy>,
}

/// Everything a verification run needs, as declared by one instance file.
#[derive(Clone)]
pub struct InstanceFile {
    pub instance: Instance,
    pub budget: PrivacyBudget,
    pub params: FilterParams,
    pub policy: HaltPolicy,
    pub strategies: Vec<NamedStrategy>,
    pub output_names: Vec<String>,
    pub request_names: Vec<String>,
}

impl InstanceFile {
    /// Claimed to satisfy the budget: true for the look-ahead rule, false
    /// for the naive pre-release rule.
    pub fn claims_budget(&self) -> bool {
        self.policy == HaltPolicy::DeltaHat
    }

    /// Human-readable rendering of a released transcript.
    pub fn format_transcript(&self, t: &Transcript) -> String {
        let mut parts = Vec::new();
        for round in 1..t.rounds() {
            let req = match t.request(round) {
                Request::Id(r) => self.request_names[r as usize].clone(),
                Request::Bottom => "start".into(),
            };
            let out = match t.output(round) {
                Output::Symbol(s) => self.output_names[s as usize].clone(),
                Output::Bottom => "start".into(),
                Output::Real(v) => format!("{v}"),
            };
            parts.push(format!("{req}={out}"));
        }
        if parts.is_empty() {
            "(no released rounds)".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Parses an instance file from disk.
pub fn load_instance(path: &Path) -> Result<InstanceFile> {
    let text = std::fs::read_to_string(path)?;
    parse_instance_str(&text)
}

/// Parses an instance file from its textual form.
pub fn parse_instance_str(text: &str) -> Result<InstanceFile> {
    Parser::default().run(text)
}

fn err(line: usize, msg: impl Into<String>) -> DpError {
    DpError::Parse(format!("line {line}: {}", msg.into()))
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.contains([':', '@', '=', '|', '#']) && !s.contains(char::is_whitespace)
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PrevSpec {
    Start,
    Sym(u32),
}

struct ParsedRow {
    line: usize,
    request: u32,
    db: usize,
    prev: Option<PrevSpec>,
    probs: Vec<f64>,
}

struct RoundBlock {
    line: usize,
    lo: usize,
    hi: usize,
    requests: Vec<u32>,
    rows: Vec<ParsedRow>,
}

struct RawStrategy {
    line: usize,
    spec: String,
}

#[derive(Default)]
struct Parser {
    db_names: Vec<String>,
    neighbours: Vec<(usize, usize)>,
    budget: Option<(f64, f64)>,
    filter: Option<(HaltPolicy, f64, f64)>,
    output_names: Vec<String>,
    request_names: Vec<String>,
    declared_rounds: Option<usize>,
    blocks: Vec<RoundBlock>,
    strategies: Vec<RawStrategy>,
}

impl Parser {
    fn run(mut self, text: &str) -> Result<InstanceFile> {
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (keyword, rest) = match line.split_once(char::is_whitespace) {
                Some((k, r)) => (k, r.trim()),
                None => (line, ""),
            };
            match keyword {
                "databases" => self.parse_databases(line_no, rest)?,
                "neighbours" => self.parse_neighbours(line_no, rest)?,
                "budget" => self.parse_budget(line_no, rest)?,
                "filter" => self.parse_filter(line_no, rest)?,
                "outputs" => self.parse_outputs(line_no, rest)?,
                "rounds" => self.parse_rounds(line_no, rest)?,
                "round" => self.open_block(line_no, rest)?,
                "requests" => self.parse_requests(line_no, rest)?,
                "strategy" => self
                    .strategies
                    .push(RawStrategy { line: line_no, spec: rest.to_string() }),
                _ => self.parse_row(line_no, line)?,
            }
        }
        self.finish()
    }

    fn parse_databases(&mut self, line: usize, rest: &str) -> Result<()> {
        if !self.db_names.is_empty() {
            return Err(err(line, "databases declared twice"));
        }
        for name in rest.split_whitespace() {
            if !valid_name(name) || name.contains('-') {
                return Err(err(line, format!("invalid database name '{name}'")));
            }
            if self.db_names.iter().any(|n| n == name) {
                return Err(err(line, format!("duplicate database '{name}'")));
            }
            self.db_names.push(name.to_string());
        }
        if self.db_names.is_empty() {
            return Err(err(line, "no databases listed"));
        }
        Ok(())
    }

    fn parse_neighbours(&mut self, line: usize, rest: &str) -> Result<()> {
        for pair in rest.split_whitespace() {
            let (a, b) = pair
                .split_once('-')
                .ok_or_else(|| err(line, format!("expected name-name, got '{pair}'")))?;
            let ai = self.db_index(line, a)?;
            let bi = self.db_index(line, b)?;
            self.neighbours.push((ai, bi));
        }
        if self.neighbours.is_empty() {
            return Err(err(line, "no neighbour pairs listed"));
        }
        Ok(())
    }

    fn parse_budget(&mut self, line: usize, rest: &str) -> Result<()> {
        let kv = parse_kv(line, rest)?;
        let epsilon = require_num(line, &kv, "epsilon")?;
        let delta = require_num(line, &kv, "delta")?;
        self.budget = Some((epsilon, delta));
        Ok(())
    }

    fn parse_filter(&mut self, line: usize, rest: &str) -> Result<()> {
        let (kind, tail) = match rest.split_once(char::is_whitespace) {
            Some((k, t)) => (k, t.trim()),
            None => (rest, ""),
        };
        match kind {
            "look-ahead" => {
                let kv = parse_kv(line, tail)?;
                let dt = require_num(line, &kv, "delta_tilde")?;
                let th = require_num(line, &kv, "theta")?;
                self.filter = Some((HaltPolicy::DeltaHat, dt, th));
            }
            "naive" => {
                if !tail.is_empty() {
                    return Err(err(line, "the naive filter takes no parameters"));
                }
                self.filter = Some((HaltPolicy::NaivePreRelease, f64::NAN, 0.0));
            }
            _ => {
                return Err(err(line, format!("unknown filter kind '{kind}'")));
            }
        }
        Ok(())
    }

    fn parse_outputs(&mut self, line: usize, rest: &str) -> Result<()> {
        if !self.output_names.is_empty() {
            return Err(err(line, "outputs declared twice"));
        }
        for name in rest.split_whitespace() {
            if !valid_name(name) || name == "start" {
                return Err(err(line, format!("invalid output name '{name}'")));
            }
            if self.output_names.iter().any(|n| n == name) {
                return Err(err(line, format!("duplicate output '{name}'")));
            }
            self.output_names.push(name.to_string());
        }
        if self.output_names.is_empty() {
            return Err(err(line, "no outputs listed"));
        }
        Ok(())
    }

    fn parse_rounds(&mut self, line: usize, rest: &str) -> Result<()> {
        let n: usize =
            rest.parse().map_err(|_| err(line, format!("invalid round count '{rest}'")))?;
        if n == 0 {
            return Err(err(line, "at least one round required"));
        }
        self.declared_rounds = Some(n);
        Ok(())
    }

    fn open_block(&mut self, line: usize, rest: &str) -> Result<()> {
        let (lo, hi) = match rest.split_once("..") {
            Some((a, b)) => {
                let lo = a.trim().parse().map_err(|_| err(line, "invalid round range"))?;
                let hi = b.trim().parse().map_err(|_| err(line, "invalid round range"))?;
                (lo, hi)
            }
            None => {
                let r: usize =
                    rest.parse().map_err(|_| err(line, format!("invalid round index '{rest}'")))?;
                (r, r)
            }
        };
        if lo == 0 || hi < lo {
            return Err(err(line, "round indices are 1-based and ranges inclusive"));
        }
        self.blocks.push(RoundBlock { line, lo, hi, requests: Vec::new(), rows: Vec::new() });
        Ok(())
    }

    fn parse_requests(&mut self, line: usize, rest: &str) -> Result<()> {
        let names: Vec<&str> = rest.split_whitespace().collect();
        if names.is_empty() {
            return Err(err(line, "no requests listed"));
        }
        let mut ids = Vec::new();
        for name in names {
            if !valid_name(name) || name == "start" {
                return Err(err(line, format!("invalid request name '{name}'")));
            }
            let id = match self.request_names.iter().position(|n| n == name) {
                Some(i) => i as u32,
                None => {
                    self.request_names.push(name.to_string());
                    (self.request_names.len() - 1) as u32
                }
            };
            if ids.contains(&id) {
                return Err(err(line, format!("duplicate request '{name}'")));
            }
            ids.push(id);
        }
        let block = self
            .blocks
            .last_mut()
            .ok_or_else(|| err(line, "requests outside a round block"))?;
        if !block.requests.is_empty() {
            return Err(err(line, "requests declared twice in one round block"));
        }
        block.requests = ids;
        Ok(())
    }

    fn parse_row(&mut self, line: usize, text: &str) -> Result<()> {
        let (head, tail) = text
            .split_once(':')
            .ok_or_else(|| err(line, format!("unrecognised directive '{text}'")))?;
        let (target, prev) = match head.split_once('|') {
            Some((t, cond)) => {
                let cond = cond.trim();
                let name = cond
                    .strip_prefix("prev=")
                    .ok_or_else(|| err(line, "condition must have the form prev=NAME"))?
                    .trim();
                let prev = if name == "start" {
                    PrevSpec::Start
                } else {
                    PrevSpec::Sym(self.output_index(line, name)?)
                };
                (t.trim(), Some(prev))
            }
            None => (head.trim(), None),
        };
        let (req_name, db_name) = target
            .split_once('@')
            .ok_or_else(|| err(line, "distribution rows have the form REQUEST @ DATABASE: ..."))?;
        let req_name = req_name.trim();
        let request = self
            .request_names
            .iter()
            .position(|n| n == req_name)
            .ok_or_else(|| err(line, format!("unknown request '{req_name}'")))?
            as u32;
        let db = self.db_index(line, db_name.trim())?;
        let mut probs = vec![0.0; self.output_names.len()];
        for pair in tail.split_whitespace() {
            let (out, p) = pair
                .split_once(':')
                .ok_or_else(|| err(line, format!("expected OUTPUT:PROB, got '{pair}'")))?;
            let s = self.output_index(line, out)? as usize;
            let p: f64 =
                p.parse().map_err(|_| err(line, format!("invalid probability '{p}'")))?;
            probs[s] = p;
        }
        let block =
            self.blocks.last_mut().ok_or_else(|| err(line, "distribution row outside a round block"))?;
        if block.requests.is_empty() {
            return Err(err(line, "round block must declare its requests first"));
        }
        if !block.requests.contains(&request) {
            return Err(err(line, format!("request '{req_name}' not allowed in this round")));
        }
        block.rows.push(ParsedRow { line, request, db, prev, probs });
        Ok(())
    }

    fn db_index(&self, line: usize, name: &str) -> Result<usize> {
        self.db_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| err(line, format!("unknown database '{name}'")))
    }

    fn output_index(&self, line: usize, name: &str) -> Result<u32> {
        self.output_names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32)
            .ok_or_else(|| err(line, format!("unknown output '{name}'")))
    }

    fn finish(self) -> Result<InstanceFile> {
        let space = DatabaseSpace::new(self.db_names.clone(), &self.neighbours)?;
        let (epsilon, delta) =
            self.budget.ok_or_else(|| err(0, "missing 'budget' directive"))?;
        let budget = PrivacyBudget::new(epsilon, delta)?;
        let (policy, dt, th) =
            self.filter.ok_or_else(|| err(0, "missing 'filter' directive"))?;
        let n_rounds =
            self.declared_rounds.ok_or_else(|| err(0, "missing 'rounds' directive"))?;
        if self.output_names.is_empty() {
            return Err(err(0, "missing 'outputs' directive"));
        }

        let mut rounds: Vec<Option<RoundSpec>> = vec![None; n_rounds];
        for block in &self.blocks {
            if block.hi > n_rounds {
                return Err(err(
                    block.line,
                    format!("round {} exceeds the declared count {n_rounds}", block.hi),
                ));
            }
            if block.requests.is_empty() {
                return Err(err(block.line, "round block missing its requests line"));
            }
            let mechanism = self.build_mechanism(block)?;
            let requests: Vec<Request> =
                block.requests.iter().map(|&r| Request::Id(r)).collect();
            for r in block.lo..=block.hi {
                if rounds[r - 1].is_some() {
                    return Err(err(block.line, format!("round {r} specified twice")));
                }
                rounds[r - 1] =
                    Some(RoundSpec { requests: requests.clone(), mechanism: mechanism.clone() });
            }
        }
        let rounds: Vec<RoundSpec> = rounds
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| err(0, format!("round {} has no block", i + 1))))
            .collect::<Result<_>>()?;
        let instance = Instance { space, rounds };

        let params = match policy {
            HaltPolicy::NaivePreRelease => FilterParams::new(budget.delta, 0.0, n_rounds, &budget)?,
            _ => FilterParams::new(dt, th, n_rounds, &budget)?,
        };

        let mut strategies = Vec::new();
        for raw in &self.strategies {
            let named = self.resolve_strategy(raw, &instance)?;
            if strategies.iter().any(|s: &NamedStrategy| s.name == named.name) {
                return Err(err(raw.line, format!("duplicate strategy '{}'", named.name)));
            }
            strategies.push(named);
        }
        if strategies.is_empty() {
            return Err(err(0, "at least one 'strategy' directive required"));
        }

        Ok(InstanceFile {
            instance,
            budget,
            params,
            policy,
            strategies,
            output_names: self.output_names,
            request_names: self.request_names,
        })
    }

    fn build_mechanism(&self, block: &RoundBlock) -> Result<Arc<DiscreteTableMechanism>> {
        let n_symbols = self.output_names.len() as u32;
        let conditioned = block.rows.iter().any(|r| r.prev.is_some());
        if conditioned && block.rows.iter().any(|r| r.prev.is_none()) {
            return Err(err(
                block.line,
                "round block mixes conditioned and unconditioned rows",
            ));
        }
        if conditioned {
            let mut builder = DiscreteTableMechanism::conditioned_builder(n_symbols);
            let mut seen = BTreeMap::new();
            for row in &block.rows {
                let prev = row.prev.unwrap();
                let key = (row.request, row.db, prev);
                if seen.insert(key, ()).is_some() {
                    return Err(err(row.line, "duplicate conditioned row"));
                }
                let prev_id = match prev {
                    PrevSpec::Start => None,
                    PrevSpec::Sym(s) => Some(s),
                };
                builder = builder
                    .row(row.request, row.db as u32, prev_id, row.probs.clone())
                    .map_err(|e| err(row.line, e.to_string()))?;
            }
            // Every previous output reachable at some round of the block
            // needs a row: the sentinel where the block covers round 1,
            // every symbol where it covers later rounds.
            let mut required = Vec::new();
            if block.lo == 1 {
                required.push(PrevSpec::Start);
            }
            if block.hi > 1 {
                required.extend((0..n_symbols).map(PrevSpec::Sym));
            }
            for &req in &block.requests {
                for db in 0..self.db_names.len() {
                    for &prev in &required {
                        if !seen.contains_key(&(req, db, prev)) {
                            return Err(err(
                                block.line,
                                format!(
                                    "missing conditioned row for request '{}' at database '{}'",
                                    self.request_names[req as usize], self.db_names[db]
                                ),
                            ));
                        }
                    }
                }
            }
            Ok(Arc::new(builder.build()))
        } else {
            let mut builder = DiscreteTableMechanism::builder(n_symbols);
            let mut seen = BTreeMap::new();
            for row in &block.rows {
                if seen.insert((row.request, row.db), ()).is_some() {
                    return Err(err(row.line, "duplicate distribution row"));
                }
                for r in block.lo..=block.hi {
                    builder = builder
                        .row(r as u32, row.request, row.db as u32, row.probs.clone())
                        .map_err(|e| err(row.line, e.to_string()))?;
                }
            }
            for &req in &block.requests {
                for db in 0..self.db_names.len() {
                    if !seen.contains_key(&(req, db)) {
                        return Err(err(
                            block.line,
                            format!(
                                "missing row for request '{}' at database '{}'",
                                self.request_names[req as usize], self.db_names[db]
                            ),
                        ));
                    }
                }
            }
            Ok(Arc::new(builder.build()))
        }
    }

    fn resolve_strategy(&self, raw: &RawStrategy, instance: &Instance) -> Result<NamedStrategy> {
        let line = raw.line;
        let mut words = raw.spec.split_whitespace();
        let name = words.next().ok_or_else(|| err(line, "strategy needs a name"))?;
        if !valid_name(name) {
            return Err(err(line, format!("invalid strategy name '{name}'")));
        }
        let kind = words.next().ok_or_else(|| err(line, "strategy needs a kind"))?;
        let strategy: Arc<dyn AdversaryStrategy> = match kind {
            "fixed" => {
                let mut requests = Vec::new();
                for w in words {
                    let id = self
                        .request_names
                        .iter()
                        .position(|n| n == w)
                        .ok_or_else(|| err(line, format!("unknown request '{w}'")))?;
                    requests.push(Request::Id(id as u32));
                }
                if requests.is_empty() {
                    return Err(err(line, "fixed strategy needs at least one request"));
                }
                for (i, spec) in instance.rounds.iter().enumerate() {
                    let r = requests[i.min(requests.len() - 1)];
                    if !spec.requests.contains(&r) {
                        return Err(err(
                            line,
                            format!("fixed strategy is disallowed at round {}", i + 1),
                        ));
                    }
                }
                Arc::new(FixedStrategy { requests })
            }
            "reactive" => {
                let kv = parse_kv(line, raw.spec.splitn(3, char::is_whitespace).nth(2).unwrap_or(""))?;
                let get = |key: &str| -> Result<&str> {
                    kv.get(key)
                        .map(String::as_str)
                        .ok_or_else(|| err(line, format!("reactive strategy missing '{key}='")))
                };
                let base_name = get("base")?;
                let after_name = get("after")?;
                let trigger_name = get("trigger")?;
                let lookup = |n: &str| -> Result<Request> {
                    self.request_names
                        .iter()
                        .position(|x| x == n)
                        .map(|i| Request::Id(i as u32))
                        .ok_or_else(|| err(line, format!("unknown request '{n}'")))
                };
                let base = lookup(base_name)?;
                let after = lookup(after_name)?;
                let trigger = Output::Symbol(self.output_index(line, trigger_name)?);
                for (i, spec) in instance.rounds.iter().enumerate() {
                    if !spec.requests.contains(&base) || !spec.requests.contains(&after) {
                        return Err(err(
                            line,
                            format!("reactive strategy is disallowed at round {}", i + 1),
                        ));
                    }
                }
                Arc::new(ReactiveStrategy { base, trigger, after })
            }
            _ => return Err(err(line, format!("unknown strategy kind '{kind}'"))),
        };
        Ok(NamedStrategy { name: name.to_string(), strategy })
    }
}

fn parse_kv(line: usize, text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for word in text.split_whitespace() {
        let (k, v) = word
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key=value, got '{word}'")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(line, format!("duplicate key '{k}'")));
        }
    }
    Ok(map)
}

fn require_num(line: usize, kv: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    let v = kv
        .get(key)
        .ok_or_else(|| err(line, format!("missing '{key}='")))?;
    v.parse().map_err(|_| err(line, format!("invalid number '{v}' for '{key}'")))
}
