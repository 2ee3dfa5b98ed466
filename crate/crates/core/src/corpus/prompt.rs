//! Prompt layouts shared by training, evaluation and backbone pretraining.

use super::vocab::{TokenId, Vocabulary, BOS, EOS};

/// `<bos> question : {q} answer :`, the question-only prompt used with
/// latent fusion and by the closed-book baseline.
pub fn question_prompt(vocab: &Vocabulary, question: &str) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode("question :"));
    ids.extend(vocab.encode(question));
    ids.extend(vocab.encode("answer :"));
    ids
}

/// Answer tokens followed by `<eos>`.
pub fn answer_targets(vocab: &Vocabulary, answer: &str) -> Vec<TokenId> {
    let mut ids = vocab.encode(answer);
    ids.push(EOS);
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcatPrompt {
    pub ids: Vec<TokenId>,
    /// How many of the supplied chunks made it into the prompt.
    pub chunks_used: usize,
    pub truncated: bool,
}

/// Retrieve-then-read prompt: chunk texts followed by the question prompt.
///
/// `chunks` arrive in rank order and are laid out lowest rank first so the
/// best chunk sits next to the question. When the prompt plus `reserve`
/// generated tokens would exceed `max_len`, whole chunks are dropped from
/// the front (the oldest text, i.e. the lowest-ranked chunks).
pub fn concat_prompt(
    vocab: &Vocabulary,
    chunks: &[&[TokenId]],
    question: &str,
    max_len: usize,
    reserve: usize,
) -> ConcatPrompt {
    let tail = question_prompt(vocab, question);
    let budget = max_len.saturating_sub(reserve);
    let mut used = chunks.len();
    let body = |n: usize| chunks[..n].iter().map(|c| c.len()).sum::<usize>();
    while used > 0 && body(used) + tail.len() > budget {
        used -= 1;
    }
    let mut ids = vec![BOS];
    for c in chunks[..used].iter().rev() {
        ids.extend_from_slice(c);
    }
    ids.extend_from_slice(&tail[1..]);
    ConcatPrompt { ids, chunks_used: used, truncated: used < chunks.len() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["question : answer : what is the color of zed ? a b c d"], 100).unwrap()
    }

    #[test]
    fn concat_without_chunks_is_question_prompt() {
        let v = vocab();
        let q = "what is the color of zed ?";
        let p = concat_prompt(&v, &[], q, 128, 0);
        assert_eq!(p.ids, question_prompt(&v, q));
        assert!(!p.truncated);
    }

    #[test]
    fn length_grows_by_chunk_tokens_and_best_chunk_is_last() {
        let v = vocab();
        let q = "what is the color of zed ?";
        let (a, b) = (v.encode("a a"), v.encode("b b"));
        let p = concat_prompt(&v, &[&a, &b], q, 128, 0);
        assert_eq!(p.ids.len(), question_prompt(&v, q).len() + 4);
        assert_eq!(&p.ids[1..3], b.as_slice());
        assert_eq!(&p.ids[3..5], a.as_slice());
    }

    #[test]
    fn overflow_drops_lowest_ranked_first() {
        let v = vocab();
        let q = "what is the color of zed ?";
        let base = question_prompt(&v, q).len();
        let (a, b) = (v.encode("a a"), v.encode("b b"));
        let p = concat_prompt(&v, &[&a, &b], q, base + 3, 0);
        assert!(p.truncated);
        assert_eq!(p.chunks_used, 1);
        assert_eq!(&p.ids[1..3], a.as_slice());
    }
}
