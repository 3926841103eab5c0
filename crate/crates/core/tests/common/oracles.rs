//! Independent reference implementations used by the metric tests.

/// Corpus BLEU-4 written from the textbook definition with string n-grams
/// and explicit loops, sharing nothing with the library version.
pub fn bleu_oracle(pairs: &[(&str, &str)], smooth: bool) -> f64 {
    let mut hyp_len = 0.0;
    let mut ref_len = 0.0;
    let mut num = [0.0f64; 4];
    let mut den = [0.0f64; 4];
    for (h, r) in pairs {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len() as f64;
        ref_len += r.len() as f64;
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            let grams = |s: &[&str]| -> Vec<String> { (0..s.len() + 1 - n).map(|i| s[i..i + n].join(" ")).collect() };
            let hg = grams(&h);
            let rg = if r.len() >= n { grams(&r) } else { Vec::new() };
            let mut used = vec![false; rg.len()];
            for g in &hg {
                if let Some(k) = (0..rg.len()).find(|&k| !used[k] && rg[k] == *g) {
                    used[k] = true;
                    num[n - 1] += 1.0;
                }
            }
            den[n - 1] += hg.len() as f64;
        }
    }
    if hyp_len == 0.0 {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 0..4 {
        let p = if num[n] > 0.0 {
            num[n] / den[n]
        } else if smooth && n > 0 {
            1.0 / (den[n] + 1.0)
        } else {
            return 0.0;
        };
        product *= p.powf(0.25);
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len / hyp_len).exp() };
    bp * product
}

pub const BLEU_PAIRS: [(&str, &str); 20] = [
    ("the the the", "the cat sat"),
    ("the cat sat on the mat", "the cat sat on the mat"),
    ("a cat sat on the mat", "the cat sat on the mat"),
    ("i am fine thank you", "i am fine thanks"),
    ("how are you", "how are you doing today"),
    ("congratulations on the new job", "congratulations on your new job"),
    ("that is so sad", "i am so sorry to hear that"),
    ("what a surprise", "what a nice surprise"),
    ("no", "no way"),
    ("let us go to the beach", "let us go to the beach tomorrow"),
    ("i hate this", "i really hate this weather"),
    ("the exam was hard", "the exam was really hard"),
    ("see you later", "see you soon"),
    ("yes please", "yes please"),
    ("keep away from me", "stay away from me"),
    ("do not worry", "do not worry about it"),
    ("wow really", "really ? no way"),
    ("the bank is closed", "the bank closed early today"),
    ("good morning to you", "good morning"),
    ("it is raining again today", "it is raining again"),
];
