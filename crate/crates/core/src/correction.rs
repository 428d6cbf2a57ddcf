//! Post-recognition correction: candidate providers and the conservative
//! acceptance filters applied to their proposals.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{char_distance, edit_script, normalize_words, EditOp};

const DEFAULT_STOPLIST: &str = include_str!("../data/generic_stoplist.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionCandidate {
    pub text: String,
    pub confidence: f64,
    pub provider_id: String,
}

impl CorrectionCandidate {
    pub fn new(text: impl Into<String>, confidence: f64, provider_id: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Provider(format!("confidence {confidence} is outside [0, 1]")));
        }
        Ok(Self {
            text: text.into(),
            confidence,
            provider_id: provider_id.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestEntry {
    pub text: String,
    pub log_prob: f64,
}

/// What a provider receives: the top transcript, optionally the full N-best list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub transcript: String,
    #[serde(default)]
    pub n_best: Vec<NBestEntry>,
    pub max_tokens: usize,
}

impl CorrectionRequest {
    pub fn new(transcript: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            transcript: transcript.into(),
            n_best: Vec::new(),
            max_tokens,
        }
    }
}

pub trait CorrectionProvider: Send + Sync {
    fn id(&self) -> &str;
    fn propose(&self, request: &CorrectionRequest) -> Result<Vec<CorrectionCandidate>>;
}

pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .flat_map(normalize_words)
        .collect()
}

pub fn default_stoplist() -> Vec<String> {
    parse_word_list(DEFAULT_STOPLIST)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub confidence_threshold: f64,
    /// Corrections whose changed words are all shorter than this are trivial.
    pub min_edit_chars: usize,
    pub generic_stoplist: Vec<String>,
    pub domain_lexicon: Option<Vec<String>>,
    pub max_seq_tokens: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: 0.7,
            min_edit_chars: 2,
            generic_stoplist: default_stoplist(),
            domain_lexicon: None,
            max_seq_tokens: 128,
        }
    }
}

impl FilterConfig {
    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            out.push(format!(
                "{section}.confidence_threshold must be in [0, 1] (got {})",
                self.confidence_threshold
            ));
        }
        if self.max_seq_tokens == 0 {
            out.push(format!("{section}.max_seq_tokens must be >= 1"));
        }
        out
    }
}

/// Normalised words removed from and introduced into the input by a candidate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordChanges {
    pub removed: Vec<String>,
    pub introduced: Vec<String>,
}

pub fn word_changes(input: &str, candidate: &str) -> WordChanges {
    let a = normalize_words(input);
    let b = normalize_words(candidate);
    let mut out = WordChanges::default();
    let (mut i, mut j) = (0, 0);
    for op in edit_script(&a, &b) {
        match op {
            EditOp::Match => {
                i += 1;
                j += 1;
            }
            EditOp::Substitute => {
                out.removed.push(a[i].clone());
                out.introduced.push(b[j].clone());
                i += 1;
                j += 1;
            }
            EditOp::Delete => {
                out.removed.push(a[i].clone());
                i += 1;
            }
            EditOp::Insert => {
                out.introduced.push(b[j].clone());
                j += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    LowConfidence,
    TooLong,
    TrivialEdit,
    GenericSubstitution,
    OutOfDomain,
}

/// The first filter a candidate fails, if any.
pub fn assess(input: &str, candidate: &CorrectionCandidate, cfg: &FilterConfig) -> Option<Rejection> {
    if !(candidate.confidence >= cfg.confidence_threshold) {
        return Some(Rejection::LowConfidence);
    }
    if candidate.text.split_whitespace().count() > cfg.max_seq_tokens {
        return Some(Rejection::TooLong);
    }
    let changes = word_changes(input, &candidate.text);
    let long_enough = |w: &String| w.chars().count() >= cfg.min_edit_chars;
    if !changes.removed.iter().chain(&changes.introduced).any(long_enough) {
        return Some(Rejection::TrivialEdit);
    }
    if changes
        .removed
        .iter()
        .chain(&changes.introduced)
        .all(|w| cfg.generic_stoplist.contains(w))
    {
        return Some(Rejection::GenericSubstitution);
    }
    if let Some(lexicon) = &cfg.domain_lexicon {
        let input_words = normalize_words(input);
        if !changes
            .introduced
            .iter()
            .all(|w| lexicon.contains(w) || input_words.contains(w))
        {
            return Some(Rejection::OutOfDomain);
        }
    }
    None
}

/// Survivors of every filter, highest confidence first (ties keep provider order).
pub fn filter_candidates(input: &str, candidates: &[CorrectionCandidate], cfg: &FilterConfig) -> Vec<CorrectionCandidate> {
    let mut out: Vec<CorrectionCandidate> = candidates
        .iter()
        .filter(|c| assess(input, c, cfg).is_none())
        .cloned()
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}

/// Top accepted text, or the input unchanged.
pub fn apply_correction(input: &str, accepted: &[CorrectionCandidate]) -> String {
    let mut best: Option<&CorrectionCandidate> = None;
    for c in accepted {
        if best.is_none_or(|b| c.confidence > b.confidence) {
            best = Some(c);
        }
    }
    best.map_or_else(|| input.to_string(), |c| c.text.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub input: String,
    pub output: String,
    pub proposed: usize,
    pub accepted: usize,
}

pub fn correct(provider: &dyn CorrectionProvider, request: &CorrectionRequest, cfg: &FilterConfig) -> Result<CorrectionOutcome> {
    let proposed = provider.propose(request)?;
    let accepted = filter_candidates(&request.transcript, &proposed, cfg);
    Ok(CorrectionOutcome {
        input: request.transcript.clone(),
        output: apply_correction(&request.transcript, &accepted),
        proposed: proposed.len(),
        accepted: accepted.len(),
    })
}

/// Dictionary corrector: every out-of-lexicon word is replaced by a nearby
/// lexicon word, with confidence `1 / (1 + distance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MockProvider {
    lexicon: Vec<String>,
    pub n_candidates: usize,
}

impl MockProvider {
    pub const ID: &'static str = "mock";

    pub fn new<S: AsRef<str>>(lexicon: impl IntoIterator<Item = S>, n_candidates: usize) -> Self {
        let set: BTreeSet<String> = lexicon
            .into_iter()
            .flat_map(|w| normalize_words(w.as_ref()))
            .collect();
        Self {
            lexicon: set.into_iter().collect(),
            n_candidates: n_candidates.max(1),
        }
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    /// Lexicon words ordered by edit distance, then length difference, then spelling.
    pub fn nearest(&self, word: &str) -> Vec<(String, usize)> {
        let len = word.chars().count();
        let mut ranked: Vec<(String, usize)> = self
            .lexicon
            .iter()
            .map(|w| (w.clone(), char_distance(word, w)))
            .collect();
        ranked.sort_by(|a, b| {
            a.1.cmp(&b.1)
                .then(a.0.chars().count().abs_diff(len).cmp(&b.0.chars().count().abs_diff(len)))
                .then(a.0.cmp(&b.0))
        });
        ranked
    }
}

impl CorrectionProvider for MockProvider {
    fn id(&self) -> &str {
        Self::ID
    }

    fn propose(&self, request: &CorrectionRequest) -> Result<Vec<CorrectionCandidate>> {
        let raw: Vec<&str> = request.transcript.split_whitespace().collect();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let mut options: Vec<Option<Vec<(String, usize)>>> = Vec::with_capacity(raw.len());
        for w in &raw {
            let norm = normalize_words(w).join("");
            if norm.is_empty() || self.lexicon.binary_search(&norm).is_ok() || self.lexicon.is_empty() {
                options.push(None);
            } else {
                options.push(Some(self.nearest(&norm)));
            }
        }
        if options.iter().all(Option::is_none) {
            return Ok(vec![CorrectionCandidate::new(request.transcript.clone(), 1.0, Self::ID)?]);
        }
        let mut out: Vec<CorrectionCandidate> = Vec::new();
        for rank in 0..self.n_candidates {
            let mut words = Vec::with_capacity(raw.len());
            let mut conf = 1.0f64;
            for (w, opt) in raw.iter().zip(&options) {
                match opt {
                    None => words.push(w.to_string()),
                    Some(list) => {
                        let (rep, d) = &list[rank.min(list.len() - 1)];
                        conf = conf.min(1.0 / (1.0 + *d as f64));
                        words.push(rep.clone());
                    }
                }
            }
            let text = words.join(" ");
            if out.iter().all(|c| c.text != text) {
                out.push(CorrectionCandidate::new(text, conf, Self::ID)?);
            }
        }
        Ok(out)
    }
}

/// Line-delimited JSON over TCP: one request line out, one response line back.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteProvider {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteCandidate {
    pub text: String,
    #[serde(default)]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub token_log_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub candidates: Vec<RemoteCandidate>,
}

/// Geometric mean of token probabilities.
pub fn geometric_mean_confidence(token_log_probs: &[f64]) -> Option<f64> {
    if token_log_probs.is_empty() {
        return None;
    }
    let m = token_log_probs.iter().sum::<f64>() / token_log_probs.len() as f64;
    Some(m.exp().clamp(0.0, 1.0))
}

impl RemoteProvider {
    pub const ID: &'static str = "remote";

    pub fn new(endpoint: impl Into<String>, timeout_s: f64, retries: usize) -> Result<Self> {
        if !(timeout_s > 0.0) || !timeout_s.is_finite() {
            return Err(Error::param(format!("timeout must be positive (got {timeout_s})")));
        }
        Ok(Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs_f64(timeout_s),
            retries,
        })
    }

    fn address(&self) -> &str {
        self.endpoint.strip_prefix("tcp://").unwrap_or(&self.endpoint)
    }

    fn attempt(&self, line: &str) -> Result<RemoteResponse> {
        let start = Instant::now();
        let timeout_err = || Error::Timeout(self.timeout.as_secs_f64());
        let addr = self
            .address()
            .to_socket_addrs()
            .map_err(|e| Error::Provider(format!("cannot resolve `{}`: {e}", self.endpoint)))?
            .next()
            .ok_or_else(|| Error::Provider(format!("`{}` resolves to no address", self.endpoint)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| match e.kind() {
            std::io::ErrorKind::TimedOut => timeout_err(),
            _ => Error::Provider(format!("cannot connect to `{}`: {e}", self.endpoint)),
        })?;
        let remaining = || self.timeout.checked_sub(start.elapsed()).filter(|d| !d.is_zero());
        let is_timeout = |e: &std::io::Error| {
            matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock)
        };
        stream.set_write_timeout(Some(remaining().ok_or_else(timeout_err)?))?;
        stream
            .write_all(line.as_bytes())
            .and_then(|_| stream.write_all(b"\n"))
            .and_then(|_| stream.flush())
            .map_err(|e| if is_timeout(&e) { timeout_err() } else { Error::Io(e) })?;
        stream.set_read_timeout(Some(remaining().ok_or_else(timeout_err)?))?;
        let mut reply = String::new();
        BufReader::new(&stream)
            .read_line(&mut reply)
            .map_err(|e| if is_timeout(&e) { timeout_err() } else { Error::Io(e) })?;
        if start.elapsed() > self.timeout {
            return Err(timeout_err());
        }
        if reply.trim().is_empty() {
            return Err(Error::Provider("empty response".into()));
        }
        serde_json::from_str(reply.trim()).map_err(|e| Error::Provider(format!("malformed response: {e}")))
    }
}

impl CorrectionProvider for RemoteProvider {
    fn id(&self) -> &str {
        Self::ID
    }

    fn propose(&self, request: &CorrectionRequest) -> Result<Vec<CorrectionCandidate>> {
        let line = serde_json::to_string(request)?;
        let mut last = None;
        for _ in 0..=self.retries {
            match self.attempt(&line) {
                Ok(resp) => {
                    return resp
                        .candidates
                        .into_iter()
                        .map(|c| {
                            let conf = match (c.confidence, c.token_log_probs.as_deref()) {
                                (Some(v), _) => v,
                                (None, Some(lp)) => geometric_mean_confidence(lp)
                                    .ok_or_else(|| Error::Provider("empty token_log_probs".into()))?,
                                (None, None) => {
                                    return Err(Error::Provider(format!(
                                        "candidate `{}` has neither confidence nor token_log_probs",
                                        c.text
                                    )))
                                }
                            };
                            CorrectionCandidate::new(c.text, conf, Self::ID)
                        })
                        .collect();
                }
                Err(e @ (Error::Timeout(_) | Error::Io(_) | Error::Provider(_))) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Provider("no attempt made".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::net::TcpListener;
    use std::thread;

    fn cand(text: &str, conf: f64) -> CorrectionCandidate {
        CorrectionCandidate::new(text, conf, "t").unwrap()
    }

    #[test]
    fn low_confidence_rejected() {
        let cfg = FilterConfig::default();
        let c = cand("the cat sat on the mat", 0.65);
        assert_eq!(assess("the cat zat on the mat", &c, &cfg), Some(Rejection::LowConfidence));
    }

    #[test]
    fn identical_text_is_trivial() {
        let cfg = FilterConfig::default();
        let input = "the cat sat";
        assert_eq!(assess(input, &cand(input, 0.99), &cfg), Some(Rejection::TrivialEdit));
        assert_eq!(assess(input, &cand("The cat, sat.", 0.99), &cfg), Some(Rejection::TrivialEdit));
        assert_eq!(assess("x cat", &cand("y cat", 0.99), &cfg), Some(Rejection::TrivialEdit));
    }

    #[test]
    fn worked_example_is_accepted() {
        let cfg = FilterConfig {
            domain_lexicon: Some(vec!["sat".into()]),
            ..FilterConfig::default()
        };
        let input = "the cat zat on the mat";
        let accepted = filter_candidates(input, &[cand("the cat sat on the mat", 0.9)], &cfg);
        assert_eq!(accepted.len(), 1);
        assert_eq!(accepted[0].text, "the cat sat on the mat");
    }

    #[test]
    fn generic_and_domain_filters() {
        let mut cfg = FilterConfig::default();
        assert_eq!(
            assess("the cat sat", &cand("a cat sat", 0.9), &cfg),
            Some(Rejection::GenericSubstitution)
        );
        cfg.domain_lexicon = Some(vec!["dog".into()]);
        assert_eq!(assess("the cat sat", &cand("the bat sat", 0.9), &cfg), Some(Rejection::OutOfDomain));
        assert_eq!(assess("the cat sat", &cand("the dog sat", 0.9), &cfg), None);
        assert_eq!(assess("the cat sat", &cand("the sat cat", 0.9), &cfg), None);
        cfg.max_seq_tokens = 2;
        assert_eq!(assess("the cat sat", &cand("the dog sat", 0.9), &cfg), Some(Rejection::TooLong));
    }

    #[test]
    fn apply_examples() {
        assert_eq!(apply_correction("keep me", &[]), "keep me");
        assert_eq!(apply_correction("x", &[cand("one", 0.8)]), "one");
        assert_eq!(apply_correction("x", &[cand("low", 0.8), cand("high", 0.9)]), "high");
        assert_eq!(apply_correction("x", &[cand("first", 0.9), cand("second", 0.9)]), "first");
    }

    #[test]
    fn mock_examples() {
        let mock = MockProvider::new(["sat", "at"], 2);
        let near = mock.nearest("zat");
        assert_eq!(near[0], ("sat".to_string(), 1));
        assert_eq!(near[1], ("at".to_string(), 1));
        let c = mock.propose(&CorrectionRequest::new("zat", 128)).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].text.as_str(), c[0].confidence), ("sat", 0.5));
        assert_eq!(c[1].text, "at");
        assert!(mock.propose(&CorrectionRequest::new("", 128)).unwrap().is_empty());
        let same = mock.propose(&CorrectionRequest::new("at sat", 128)).unwrap();
        assert_eq!(same, vec![cand_id("at sat", 1.0, "mock")]);
        assert_eq!(mock.propose(&CorrectionRequest::new("zat", 128)).unwrap(), c);
    }

    fn cand_id(text: &str, conf: f64, id: &str) -> CorrectionCandidate {
        CorrectionCandidate::new(text, conf, id).unwrap()
    }

    #[test]
    fn stoplist_ships() {
        let s = default_stoplist();
        assert!(s.contains(&"the".to_string()));
        assert!(s.contains(&"um".to_string()));
        assert!(!s.iter().any(|w| w.starts_with('#')));
    }

    #[test]
    fn confidence_must_be_a_probability() {
        assert!(CorrectionCandidate::new("x", 1.2, "t").is_err());
        assert!(CorrectionCandidate::new("x", f64::NAN, "t").is_err());
        assert_eq!(geometric_mean_confidence(&[0.5f64.ln(), 0.5f64.ln()]), Some(0.5));
    }

    fn serve(reply: &'static str, delay: Duration) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        thread::spawn(move || {
            for stream in listener.incoming().take(3) {
                let mut stream = stream.unwrap();
                let mut line = String::new();
                BufReader::new(&stream).read_line(&mut line).unwrap();
                let req: CorrectionRequest = serde_json::from_str(line.trim()).unwrap();
                assert_eq!(req.max_tokens, 128);
                thread::sleep(delay);
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        addr
    }

    #[test]
    fn remote_round_trip() {
        let addr = serve(
            "{\"candidates\":[{\"text\":\"the cat sat\",\"confidence\":0.9},{\"text\":\"a cat sat\",\"token_log_probs\":[-0.1,-0.3]}]}\n",
            Duration::ZERO,
        );
        let p = RemoteProvider::new(format!("tcp://{addr}"), 2.0, 0).unwrap();
        let mut req = CorrectionRequest::new("the cat zat", 128);
        req.n_best.push(NBestEntry { text: "the cat zat".into(), log_prob: -1.0 });
        let c = p.propose(&req).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].confidence, 0.9);
        assert!((c[1].confidence - (-0.2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn remote_timeout() {
        let addr = serve("{\"candidates\":[]}\n", Duration::from_millis(600));
        let p = RemoteProvider::new(addr, 0.1, 1).unwrap();
        assert!(matches!(p.propose(&CorrectionRequest::new("x", 128)), Err(Error::Timeout(_))));
    }

    #[test]
    fn remote_unreachable_is_provider_error() {
        let addr = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().to_string()
        };
        let p = RemoteProvider::new(addr, 0.5, 0).unwrap();
        assert!(p.propose(&CorrectionRequest::new("x", 128)).is_err());
    }

    proptest! {
        #[test]
        fn threshold_monotone(confs in prop::collection::vec(0.0f64..1.0, 0..12), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let cands: Vec<_> = confs.iter().enumerate().map(|(i, c)| cand(&format!("word{i} fixed"), *c)).collect();
            let count = |t| filter_candidates("input text", &cands, &FilterConfig { confidence_threshold: t, ..FilterConfig::default() }).len();
            prop_assert!(count(hi) <= count(lo));
        }

        #[test]
        fn output_is_input_or_candidate(input in "[a-z ]{0,20}", texts in prop::collection::vec("[a-z ]{1,20}", 0..5), confs in prop::collection::vec(0.0f64..1.0, 5)) {
            let cands: Vec<_> = texts.iter().zip(&confs).map(|(t, c)| cand(t, *c)).collect();
            let out = apply_correction(&input, &filter_candidates(&input, &cands, &FilterConfig::default()));
            prop_assert!(out == input || texts.contains(&out));
        }

        #[test]
        fn fallback_is_bit_exact(input in "\\PC{0,30}") {
            let cands = vec![cand("something else entirely", 0.69)];
            let out = apply_correction(&input, &filter_candidates(&input, &cands, &FilterConfig::default()));
            prop_assert_eq!(out.as_bytes(), input.as_bytes());
        }
    }
}
