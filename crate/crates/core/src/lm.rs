//! Character-level back-off n-gram language model.
//!
//! Training uses interpolated Kneser–Ney with a single absolute discount.
//! Lower orders are estimated from continuation counts, except n-grams that
//! start with `<s>`, which keep their raw counts because they cannot be
//! extended to the left. The unigram level is not discounted; `<unk>` gets
//! a fixed floor probability and the rest is scaled to make room for it.
//!
//! Probabilities are stored ARPA-style: every stored n-gram carries its
//! interpolated log10 probability, and every context carries the log10 of
//! its interpolation weight, which doubles as the back-off weight.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

pub const BOS_SYMBOL: &str = "<s>";
pub const EOS_SYMBOL: &str = "</s>";
pub const UNK_SYMBOL: &str = "<unk>";
/// ARPA spelling of the space character; n-gram fields are space-separated.
pub const SPACE_SYMBOL: &str = "<sp>";

pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_DISCOUNT: f64 = 0.75;
/// Probability given to `<unk>` when no unigram mass is left over.
pub const UNK_FLOOR: f64 = 1e-10;
/// ARPA convention for the never-predicted `<s>` unigram.
const BOS_LOG10: f64 = -99.0;

#[derive(Debug, Error, PartialEq)]
pub enum LmError {
    #[error("cannot train a language model on an empty corpus")]
    EmptyCorpus,
    #[error("discount {0} must lie strictly between 0 and 1")]
    BadDiscount(f64),
    #[error("order must be at least 1")]
    BadOrder,
    #[error("ARPA line {line}: {message}")]
    MalformedHeader { line: usize, message: String },
    #[error("ARPA section {section}: header declares {expected} entries, found {found} (line {line})")]
    CountMismatch {
        section: String,
        expected: usize,
        found: usize,
        line: usize,
    },
    #[error("ARPA file is missing section {0}")]
    MissingSection(String),
    #[error("ARPA line {line}: {message}")]
    BadEntry { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: Option<f64>,
}

/// Incremental scoring state: the most recent `order - 1` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LmState {
    history: Vec<TokenId>,
}

impl LmState {
    pub fn history(&self) -> &[TokenId] {
        &self.history
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    symbols: Vec<String>,
    char_ids: HashMap<char, TokenId>,
    /// `tables[k - 1]` holds the order-`k` n-grams.
    tables: Vec<HashMap<Vec<TokenId>, Entry>>,
}

fn symbol_for(c: char) -> String {
    if c == ' ' {
        SPACE_SYMBOL.to_string()
    } else {
        c.to_string()
    }
}

fn char_for(symbol: &str) -> Option<char> {
    if symbol == SPACE_SYMBOL {
        return Some(' ');
    }
    let mut it = symbol.chars();
    match (it.next(), it.next()) {
        (Some(c), None) if !c.is_whitespace() => Some(c),
        _ => None,
    }
}

impl NGramModel {
    fn with_symbols(order: usize, chars: impl IntoIterator<Item = char>) -> Self {
        let mut symbols = vec![BOS_SYMBOL.to_string(), EOS_SYMBOL.to_string(), UNK_SYMBOL.to_string()];
        let mut char_ids = HashMap::new();
        for c in chars {
            if !char_ids.contains_key(&c) {
                char_ids.insert(c, symbols.len() as TokenId);
                symbols.push(symbol_for(c));
            }
        }
        Self {
            order,
            symbols,
            char_ids,
            tables: vec![HashMap::new(); order],
        }
    }

    /// Order-1 model giving the same probability to every character, `</s>`
    /// and `<unk>`.
    pub fn uniform(chars: impl IntoIterator<Item = char>) -> Self {
        let mut m = Self::with_symbols(1, chars);
        let v = (m.symbols.len() - 1) as f64;
        let lp = (1.0 / v).log10();
        for id in 1..m.symbols.len() as TokenId {
            m.tables[0].insert(vec![id], Entry { log10_prob: lp, log10_backoff: None });
        }
        m.tables[0].insert(vec![BOS], Entry { log10_prob: BOS_LOG10, log10_backoff: None });
        m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Every token that can be predicted: characters, `</s>` and `<unk>`.
    pub fn predictable_tokens(&self) -> impl Iterator<Item = TokenId> {
        1..self.symbols.len() as TokenId
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id as usize]
    }

    pub fn token_of(&self, c: char) -> TokenId {
        self.char_ids.get(&c).copied().unwrap_or(UNK)
    }

    /// Number of stored n-grams of order `k`.
    pub fn num_entries(&self, k: usize) -> usize {
        self.tables[k - 1].len()
    }

    /// Every stored n-gram that is also a context of a longer one, plus the
    /// empty context. These are the histories reachable from training data.
    pub fn contexts(&self) -> Vec<Vec<TokenId>> {
        let mut out = vec![Vec::new()];
        for table in &self.tables[..self.order.saturating_sub(1)] {
            let mut keys: Vec<_> = table
                .iter()
                .filter(|(_, e)| e.log10_backoff.is_some())
                .map(|(k, _)| k.clone())
                .collect();
            keys.sort();
            out.extend(keys);
        }
        out
    }

    /// Stored log10 probability of an exact n-gram, if present.
    pub fn stored_log10(&self, ngram: &[TokenId]) -> Option<f64> {
        self.tables
            .get(ngram.len().checked_sub(1)?)?
            .get(ngram)
            .map(|e| e.log10_prob)
    }

    pub fn begin_state(&self) -> LmState {
        let mut s = LmState::default();
        if self.order > 1 {
            s.history.push(BOS);
        }
        s
    }

    /// State whose history is the given tokens, truncated to `order - 1`.
    pub fn state_from(&self, history: &[TokenId]) -> LmState {
        let keep = self.order - 1;
        let start = history.len().saturating_sub(keep);
        LmState {
            history: history[start..].to_vec(),
        }
    }

    /// log10 P(token | history), following back-off from the longest context.
    pub fn log10_prob(&self, history: &[TokenId], token: TokenId) -> f64 {
        lookup(&self.tables, history, token)
    }

    pub fn score_token(&self, state: &LmState, token: TokenId) -> (f64, LmState) {
        let lp = self.log10_prob(&state.history, token);
        let mut history = state.history.clone();
        history.push(token);
        (lp, self.state_from(&history))
    }

    pub fn score_char(&self, state: &LmState, c: char) -> (f64, LmState) {
        self.score_token(state, self.token_of(c))
    }

    /// log10 probability of `<s> text </s>`.
    pub fn score_sequence(&self, text: &str) -> f64 {
        let mut state = self.begin_state();
        let mut total = 0.0;
        for c in text.chars() {
            let (lp, next) = self.score_char(&state, c);
            total += lp;
            state = next;
        }
        total + self.score_token(&state, EOS).0
    }

    /// `10^(-mean log10 prob)` over every token including `</s>`.
    pub fn perplexity(&self, texts: &[String]) -> f64 {
        let (mut total, mut count) = (0.0, 0usize);
        for t in texts {
            total += self.score_sequence(t);
            count += t.chars().count() + 1;
        }
        10f64.powf(-total / count as f64)
    }
}

fn lookup(tables: &[HashMap<Vec<TokenId>, Entry>], history: &[TokenId], token: TokenId) -> f64 {
    let max_ctx = history.len().min(tables.len() - 1);
    let mut acc = 0.0;
    let mut key = Vec::with_capacity(max_ctx + 1);
    for start in (history.len() - max_ctx)..=history.len() {
        let ctx = &history[start..];
        key.clear();
        key.extend_from_slice(ctx);
        key.push(token);
        if let Some(e) = tables[ctx.len()].get(&key) {
            return acc + e.log10_prob;
        }
        if !ctx.is_empty() {
            if let Some(b) = tables[ctx.len() - 1].get(ctx).and_then(|e| e.log10_backoff) {
                acc += b;
            }
        }
    }
    // unreachable for well-formed models: <unk> is always a unigram
    acc + tables[0].get(&vec![UNK]).map_or(UNK_FLOOR.log10(), |e| e.log10_prob)
}

/// Trains an interpolated Kneser–Ney model of the given order.
pub fn train_lm(texts: &[String], order: usize, discount: f64) -> Result<NGramModel, LmError> {
    if texts.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    if order == 0 {
        return Err(LmError::BadOrder);
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(LmError::BadDiscount(discount));
    }

    let mut chars: Vec<char> = texts.iter().flat_map(|t| t.chars()).collect();
    chars.sort_unstable();
    chars.dedup();
    let mut model = NGramModel::with_symbols(order, chars);

    let sentences: Vec<Vec<TokenId>> = texts
        .iter()
        .map(|t| {
            let mut s = vec![BOS];
            s.extend(t.chars().map(|c| model.token_of(c)));
            s.push(EOS);
            s
        })
        .collect();

    // raw[k - 1]: counts of order-k n-grams ending at a predicted position
    let mut raw: Vec<HashMap<Vec<TokenId>, u64>> = vec![HashMap::new(); order];
    for s in &sentences {
        for i in 1..s.len() {
            for k in 1..=order.min(i + 1) {
                *raw[k - 1].entry(s[i + 1 - k..=i].to_vec()).or_insert(0) += 1;
            }
        }
    }

    // adjusted counts: raw at the top order or after <s>, continuation otherwise
    let mut adjusted: Vec<HashMap<Vec<TokenId>, u64>> = vec![HashMap::new(); order];
    adjusted[order - 1] = raw[order - 1].clone();
    for k in (1..order).rev() {
        let mut cont: HashMap<Vec<TokenId>, u64> = HashMap::new();
        for g in raw[k].keys() {
            *cont.entry(g[1..].to_vec()).or_insert(0) += 1;
        }
        for (g, &c) in &raw[k - 1] {
            let a = if g[0] == BOS { c } else { cont.get(g).copied().unwrap_or(0) };
            if a > 0 {
                adjusted[k - 1].insert(g.clone(), a);
            }
        }
    }

    // unigrams
    let total: u64 = adjusted[0].values().sum();
    let scale = 1.0 - UNK_FLOOR;
    let mut unigrams: Vec<(&Vec<TokenId>, &u64)> = adjusted[0].iter().collect();
    unigrams.sort();
    for (g, &a) in unigrams {
        let p = a as f64 / total as f64 * scale;
        model.tables[0].insert(g.clone(), Entry { log10_prob: p.log10(), log10_backoff: None });
    }
    model.tables[0].insert(vec![UNK], Entry { log10_prob: UNK_FLOOR.log10(), log10_backoff: None });
    model.tables[0].insert(vec![BOS], Entry { log10_prob: BOS_LOG10, log10_backoff: None });

    // higher orders, lowest first so the lower-order interpolation term is final
    for k in 2..=order {
        let mut by_context: HashMap<&[TokenId], (u64, u64)> = HashMap::new();
        for (g, &a) in &adjusted[k - 1] {
            let e = by_context.entry(&g[..k - 1]).or_insert((0, 0));
            e.0 += a;
            e.1 += 1;
        }
        let mut new_entries = Vec::with_capacity(adjusted[k - 1].len());
        for (g, &a) in &adjusted[k - 1] {
            let (ctx, w) = (&g[..k - 1], g[k - 1]);
            let (denom, types) = by_context[ctx];
            let gamma = discount * types as f64 / denom as f64;
            let lower = 10f64.powf(lookup(&model.tables[..k - 1], &ctx[1..], w));
            let p = (a as f64 - discount) / denom as f64 + gamma * lower;
            new_entries.push((g.clone(), p.log10()));
        }
        for (g, lp) in new_entries {
            model.tables[k - 1].insert(g, Entry { log10_prob: lp, log10_backoff: None });
        }
        for (ctx, (denom, types)) in by_context {
            let gamma = discount * types as f64 / denom as f64;
            let entry = model.tables[k - 2]
                .get_mut(ctx)
                .expect("every context is itself a stored n-gram");
            entry.log10_backoff = Some(gamma.log10());
        }
    }
    Ok(model)
}

/// Serializes to ARPA text. Entries are sorted by token id within each order.
pub fn export_arpa(m: &NGramModel) -> String {
    let mut out = String::from("\\data\\\n");
    for k in 1..=m.order {
        let _ = writeln!(out, "ngram {k}={}", m.tables[k - 1].len());
    }
    for k in 1..=m.order {
        let _ = write!(out, "\n\\{k}-grams:\n");
        let mut entries: Vec<_> = m.tables[k - 1].iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        for (g, e) in entries {
            let words: Vec<&str> = g.iter().map(|&t| m.symbol(t)).collect();
            let _ = write!(out, "{}\t{}", e.log10_prob, words.join(" "));
            if let Some(b) = e.log10_backoff {
                let _ = write!(out, "\t{b}");
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

/// Parses ARPA text produced by [`export_arpa`] or any character-level
/// ARPA file whose tokens are single characters or `<sp>`.
pub fn import_arpa(text: &str) -> Result<NGramModel, LmError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();

    match lines.next() {
        Some((_, l)) if l.trim() == "\\data\\" => {}
        Some((line, l)) => {
            return Err(LmError::MalformedHeader {
                line,
                message: format!("expected \\data\\, found {l:?}"),
            })
        }
        None => return Err(LmError::MissingSection("\\data\\".into())),
    }

    let mut counts = Vec::new();
    while let Some(&(line, l)) = lines.peek() {
        let Some(rest) = l.trim().strip_prefix("ngram ") else { break };
        lines.next();
        let parsed = rest
            .split_once('=')
            .and_then(|(k, c)| Some((k.trim().parse::<usize>().ok()?, c.trim().parse::<usize>().ok()?)));
        match parsed {
            Some((k, c)) if k == counts.len() + 1 => counts.push(c),
            _ => {
                return Err(LmError::MalformedHeader {
                    line,
                    message: format!("bad count line {l:?}"),
                })
            }
        }
    }
    if counts.is_empty() {
        let line = lines.peek().map_or(0, |(l, _)| *l);
        return Err(LmError::MalformedHeader {
            line,
            message: "no ngram count lines".into(),
        });
    }

    let order = counts.len();
    let mut raw_entries: Vec<Vec<(Vec<String>, f64, Option<f64>)>> = Vec::with_capacity(order);
    for (k, &expected) in counts.iter().enumerate().map(|(i, c)| (i + 1, c)) {
        let section = format!("\\{k}-grams:");
        match lines.next() {
            Some((_, l)) if l.trim() == section => {}
            Some((line, l)) => {
                return Err(LmError::BadEntry {
                    line,
                    message: format!("expected {section}, found {l:?}"),
                })
            }
            None => return Err(LmError::MissingSection(section)),
        }
        let mut entries = Vec::with_capacity(expected);
        let mut last_line = 0;
        while let Some(&(line, l)) = lines.peek() {
            if l.trim_start().starts_with('\\') {
                break;
            }
            lines.next();
            last_line = line;
            let fields: Vec<&str> = l.split('\t').collect();
            let bad = |message: String| LmError::BadEntry { line, message };
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad(format!("expected 2 or 3 tab-separated fields, found {}", fields.len())));
            }
            let prob: f64 = fields[0].trim().parse().map_err(|_| bad(format!("bad probability {:?}", fields[0])))?;
            let words: Vec<String> = fields[1].split(' ').filter(|w| !w.is_empty()).map(String::from).collect();
            if words.len() != k {
                return Err(bad(format!("{k}-gram section holds a {}-gram", words.len())));
            }
            let backoff = match fields.get(2) {
                Some(b) => Some(b.trim().parse().map_err(|_| bad(format!("bad backoff {b:?}")))?),
                None => None,
            };
            entries.push((words, prob, backoff));
        }
        if entries.len() != expected {
            return Err(LmError::CountMismatch {
                section: section.clone(),
                expected,
                found: entries.len(),
                line: last_line,
            });
        }
        raw_entries.push(entries);
    }
    match lines.next() {
        Some((_, l)) if l.trim() == "\\end\\" => {}
        Some((line, l)) => {
            return Err(LmError::BadEntry {
                line,
                message: format!("expected \\end\\, found {l:?}"),
            })
        }
        None => return Err(LmError::MissingSection("\\end\\".into())),
    }

    let mut chars = Vec::new();
    for (words, _, _) in &raw_entries[0] {
        let w = words[0].as_str();
        if w == BOS_SYMBOL || w == EOS_SYMBOL || w == UNK_SYMBOL {
            continue;
        }
        match char_for(w) {
            Some(c) => chars.push(c),
            None => {
                return Err(LmError::BadEntry {
                    line: 0,
                    message: format!("token {w:?} is not a single character"),
                })
            }
        }
    }
    let mut model = NGramModel::with_symbols(order, chars);
    let mut ids: HashMap<&str, TokenId> = HashMap::new();
    for (i, s) in model.symbols.iter().enumerate() {
        ids.insert(s.as_str(), i as TokenId);
    }
    let mut tables = vec![HashMap::new(); order];
    for (k, entries) in raw_entries.iter().enumerate() {
        for (words, prob, backoff) in entries {
            let key = words
                .iter()
                .map(|w| {
                    ids.get(w.as_str()).copied().ok_or_else(|| LmError::BadEntry {
                        line: 0,
                        message: format!("{}-gram uses token {w:?} missing from unigrams", k + 1),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            tables[k].insert(
                key,
                Entry {
                    log10_prob: *prob,
                    log10_backoff: *backoff,
                },
            );
        }
    }
    tables[0]
        .entry(vec![UNK])
        .or_insert(Entry { log10_prob: UNK_FLOOR.log10(), log10_backoff: None });
    model.tables = tables;
    Ok(model)
}
