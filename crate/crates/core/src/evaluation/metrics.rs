use std::collections::HashMap;

/// SQuAD-style answer normalisation: lowercase, drop punctuation and the
/// articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c }).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_one(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &pt {
        if let Some(c) = counts.get_mut(t).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1 after normalisation, best over the golds.
pub fn token_f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_one(prediction, g)).fold(0.0, f64::max)
}

/// 1 if the normalised prediction equals any normalised gold. A blank
/// prediction never matches.
pub fn exact_match(prediction: &str, golds: &[String]) -> f64 {
    if prediction.trim().is_empty() {
        return 0.0;
    }
    let p = normalize_answer(prediction);
    f64::from(golds.iter().any(|g| normalize_answer(g) == p))
}

/// Option-letter accuracy on the first token, case and punctuation
/// insensitive. Articles are kept here since "a" is a valid option.
pub fn choice_accuracy(prediction: &str, golds: &[String]) -> f64 {
    let letter = |s: &str| {
        let t: String = s.to_lowercase().chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c }).collect();
        t.split_whitespace().next().map(str::to_string)
    };
    match letter(prediction) {
        Some(p) => f64::from(golds.iter().any(|g| letter(g).as_deref() == Some(p.as_str()))),
        None => 0.0,
    }
}
