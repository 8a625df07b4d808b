//! Deterministic offline providers.

use std::collections::BTreeSet;
use std::sync::Arc;

use super::{
    ChatMessage, Embedder, GenerationResult, Generator, Judge, JudgeVerdict, ProviderError,
    Reranker, SamplingParams,
};
use crate::text::{estimate_tokens, hash_parts, normalize_answer, word_tokens};

/// Usage numbers for a mock call: characters/4 of everything in and out.
pub fn mock_usage(messages: &[ChatMessage], text: String) -> GenerationResult {
    let input: u64 = messages.iter().map(|m| estimate_tokens(&m.content)).sum();
    GenerationResult {
        output_tokens: estimate_tokens(&text),
        input_tokens: input,
        text,
        usage_reported: true,
    }
}

fn params_key(params: &SamplingParams) -> String {
    format!(
        "{}|{}|{}|{:?}",
        params.temperature, params.top_p, params.max_tokens, params.seed
    )
}

/// Echo-style generator: output is a hash of the full request.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    pub seed: u64,
}

impl Generator for MockGenerator {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<GenerationResult, ProviderError> {
        let seed = self.seed.to_string();
        let pk = params_key(params);
        let parts = [seed.as_str(), pk.as_str()]
            .into_iter()
            .chain(messages.iter().flat_map(|m| [m.role.as_str(), m.content.as_str()]));
        let h = hash_parts(parts);
        Ok(mock_usage(messages, format!("mock-{h:016x}")))
    }

    fn identity(&self) -> String {
        format!("mock-generator(seed={})", self.seed)
    }
}

type ScriptFn = dyn Fn(&[ChatMessage], &SamplingParams) -> Result<String, ProviderError> + Send + Sync;

/// Generator driven by a closure over the request. Used to script agent
/// behaviour in tests.
#[derive(Clone)]
pub struct ScriptedGenerator {
    name: String,
    script: Arc<ScriptFn>,
}

impl ScriptedGenerator {
    pub fn new(
        name: impl Into<String>,
        script: impl Fn(&[ChatMessage], &SamplingParams) -> Result<String, ProviderError>
            + Send
            + Sync
            + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            script: Arc::new(script),
        }
    }
}

impl Generator for ScriptedGenerator {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<GenerationResult, ProviderError> {
        let text = (self.script)(messages, params)?;
        Ok(mock_usage(messages, text))
    }

    fn identity(&self) -> String {
        format!("scripted({})", self.name)
    }
}

/// Feature-hashed bag-of-words embedding. Texts with the same words map to
/// the same vector; texts with disjoint vocabularies are close to orthogonal.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl MockEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut words = word_tokens(text);
        if words.is_empty() {
            words.push(text.to_string());
        }
        for w in &words {
            let h = hash_parts(["embed", w.as_str()]);
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            // signed collisions cancelled out
            let h = hash_parts(["embed-fallback", text]);
            v[(h % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl Embedder for MockEmbedder {
    fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }

    fn identity(&self) -> String {
        format!("mock-embedder(dim={})", self.dim)
    }
}

/// Token-overlap reranker: shared word types over the larger vocabulary.
#[derive(Debug, Clone, Default)]
pub struct MockReranker;

pub fn overlap_coefficient(a: &str, b: &str) -> f64 {
    let sa: BTreeSet<String> = word_tokens(a).into_iter().collect();
    let sb: BTreeSet<String> = word_tokens(b).into_iter().collect();
    let denom = sa.len().max(sb.len());
    if denom == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / denom as f64
}

impl Reranker for MockReranker {
    fn score(&self, query: &str, candidate: &str) -> Result<f64, ProviderError> {
        Ok(overlap_coefficient(query, candidate))
    }

    fn identity(&self) -> String {
        "mock-reranker(overlap)".into()
    }
}

/// Strict judge: correct only on an exact match after whitespace and case
/// normalization.
#[derive(Debug, Clone, Default)]
pub struct MockJudge;

impl Judge for MockJudge {
    fn judge_raw(
        &self,
        _question: &str,
        response: &str,
        correct_answer: &str,
    ) -> Result<JudgeVerdict, ProviderError> {
        let correct = normalize_answer(response) == normalize_answer(correct_answer);
        Ok(JudgeVerdict {
            extracted_final_answer: Some(response.trim().to_string()),
            reasoning: if correct {
                "exact match after normalization".into()
            } else {
                "differs from the correct answer after normalization".into()
            },
            correct,
            confidence: 100,
        })
    }

    fn identity(&self) -> String {
        "mock-judge(exact)".into()
    }
}

type JudgeFn = dyn Fn(&str, &str, &str) -> Result<JudgeVerdict, ProviderError> + Send + Sync;

#[derive(Clone)]
pub struct ScriptedJudge {
    script: Arc<JudgeFn>,
}

impl ScriptedJudge {
    pub fn new(
        script: impl Fn(&str, &str, &str) -> Result<JudgeVerdict, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Arc::new(script),
        }
    }

    /// Verdict helper for scripts.
    pub fn verdict(correct: bool) -> JudgeVerdict {
        JudgeVerdict {
            extracted_final_answer: None,
            reasoning: "scripted".into(),
            correct,
            confidence: 100,
        }
    }
}

impl Judge for ScriptedJudge {
    fn judge_raw(
        &self,
        question: &str,
        response: &str,
        correct_answer: &str,
    ) -> Result<JudgeVerdict, ProviderError> {
        (self.script)(question, response, correct_answer)
    }

    fn identity(&self) -> String {
        "scripted-judge".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::cosine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mock_generate_is_deterministic() {
        let g = MockGenerator::default();
        let msgs = [ChatMessage::user("hi")];
        let p = SamplingParams::default();
        let a = g.generate(&msgs, &p).unwrap();
        let b = g.generate(&msgs, &p).unwrap();
        assert_eq!(a, b);
        let c = g.generate(&msgs, &p.with_seed(1)).unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn generate_rejects_empty_messages() {
        let g = MockGenerator::default();
        assert!(matches!(
            g.generate(&[], &SamplingParams::default()),
            Err(ProviderError::Precondition(_))
        ));
    }

    #[test]
    fn embeddings_unit_norm_and_identical_inputs() {
        let e = MockEmbedder::default();
        let out = e.embed(&["same text".into(), "same text".into(), "!!".into()]).unwrap();
        assert_eq!(out[0], out[1]);
        for v in &out {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(e.embed(&["".into()]).is_err());
    }

    #[test]
    fn embedding_cosine_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let texts: Vec<String> = (0..100)
            .map(|_| {
                let n = rng.gen_range(1..12);
                (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].clone()).collect::<Vec<_>>().join(" ")
            })
            .collect();
        let vs = MockEmbedder::default().embed(&texts).unwrap();
        for i in 0..vs.len() {
            for j in 0..vs.len() {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                assert!((cosine(&vs[i], &vs[j]) - dot).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn overlap_reranker_cases() {
        let r = MockReranker;
        assert_eq!(r.similarity("a b c", "a b c").unwrap(), 1.0);
        assert_eq!(r.similarity("a b c", "x y z").unwrap(), 0.0);
        assert!((r.similarity("a b c", "a b d").unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.similarity("", "x").is_err());
    }

    #[test]
    fn mock_judge_is_strict() {
        let j = MockJudge;
        assert!(j.judge_correct("q", "42", "42").unwrap().correct);
        assert!(j.judge_correct("q", " 42 \n", "42").unwrap().correct);
        assert!(!j.judge_correct("q", "42.0 approximately", "42").unwrap().correct);
        assert!(j.judge_correct("q", "", "42").is_err());
    }
}
