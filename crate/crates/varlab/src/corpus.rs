//! Deterministic synthetic English-ish corpus for byte-level desk runs.
//!
//! Sentences are drawn from small word tables with a seeded generator, so
//! any machine can regenerate an identical corpus from (seed, length). The
//! text has enough structure that a small decoder quickly beats the uniform
//! byte baseline, which is exactly what the desk-scale sanity runs need.

use varlab_core::Prng;

const SUBJECTS: [&str; 16] = [
    "the sun",
    "the moon",
    "the river",
    "the forest",
    "a child",
    "the old man",
    "the baker",
    "the sailor",
    "the winter wind",
    "the summer rain",
    "the teacher",
    "a small bird",
    "the mountain",
    "the city",
    "the garden",
    "the sea",
];

const VERBS: [&str; 16] = [
    "warms", "cools", "follows", "finds", "remembers", "watches", "carries", "fills", "touches",
    "changes", "keeps", "leaves", "meets", "holds", "crosses", "shapes",
];

const OBJECTS: [&str; 16] = [
    "the valley",
    "the shore",
    "the morning",
    "the evening",
    "an old song",
    "the quiet street",
    "the green field",
    "a distant light",
    "the open door",
    "the stone bridge",
    "the harvest",
    "the first snow",
    "the long road",
    "the night sky",
    "the warm bread",
    "the sleeping town",
];

const SEASONS: [&str; 4] = ["spring", "summer", "autumn", "winter"];

fn pick<'a>(table: &'a [&'a str], prng: &mut Prng) -> &'a str {
    table[prng.next_bounded(table.len() as u64) as usize]
}

fn sentence(prng: &mut Prng, out: &mut String) {
    let start = out.len();
    match prng.next_bounded(4) {
        0 | 1 => {
            out.push_str(pick(&SUBJECTS, prng));
            out.push(' ');
            out.push_str(pick(&VERBS, prng));
            out.push(' ');
            out.push_str(pick(&OBJECTS, prng));
        }
        2 => {
            out.push_str("in ");
            out.push_str(pick(&SEASONS, prng));
            out.push_str(", ");
            out.push_str(pick(&SUBJECTS, prng));
            out.push(' ');
            out.push_str(pick(&VERBS, prng));
            out.push(' ');
            out.push_str(pick(&OBJECTS, prng));
        }
        _ => {
            out.push_str(pick(&SUBJECTS, prng));
            out.push(' ');
            out.push_str(pick(&VERBS, prng));
            out.push(' ');
            out.push_str(pick(&OBJECTS, prng));
            out.push_str(" and ");
            out.push_str(pick(&SUBJECTS, prng));
            out.push(' ');
            out.push_str(pick(&VERBS, prng));
            out.push(' ');
            out.push_str(pick(&OBJECTS, prng));
        }
    }
    out.push('.');
    // Sentence-case the first letter (all table text is ASCII).
    let upper = out[start..start + 1].to_ascii_uppercase();
    out.replace_range(start..start + 1, &upper);
}

/// Generates exactly `n_bytes` of ASCII text from the seed.
pub fn generate(seed: u64, n_bytes: usize) -> String {
    let mut prng = Prng::substream(seed, u64::from_le_bytes(*b"corpusgn"));
    let mut out = String::with_capacity(n_bytes + 128);
    let mut sentences_on_line = 0usize;
    while out.len() < n_bytes {
        if sentences_on_line == 8 {
            out.push('\n');
            sentences_on_line = 0;
        } else if !out.is_empty() {
            out.push(' ');
        }
        sentence(&mut prng, &mut out);
        sentences_on_line += 1;
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn is_deterministic_and_exactly_sized() {
        let a = generate(3, 10_000);
        let b = generate(3, 10_000);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        assert_ne!(a, generate(4, 10_000));
    }

    #[test]
    fn is_ascii_with_sentence_structure() {
        let text = generate(0, 50_000);
        assert!(text.is_ascii());
        assert!(text.contains(". "), "sentences are separated");
        assert!(text.contains('\n'), "long output wraps lines");
        let periods = text.bytes().filter(|&b| b == b'.').count();
        assert!(periods > 500, "plenty of short sentences, got {periods}");
    }

    #[test]
    fn repeats_structure_a_model_can_learn() {
        // The word tables are tiny, so common words recur constantly.
        let text = generate(1, 100_000);
        let the_count = text.matches("the ").count();
        assert!(the_count > 2_000, "got {the_count}");
    }
}
