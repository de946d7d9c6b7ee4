//! Deterministic English-like text for experiments that have no corpus at hand.
//!
//! Sentences come from a handful of templates filled with Zipf-weighted
//! words, so the byte stream has spelling, word-order and paragraph structure
//! for a small model to learn.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "Ada", "Basil", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Iris", "Jonas", "Karin", "Leon", "Mara",
    "Nils", "Olga", "Pavel", "Rosa", "Simon", "Tessa", "Viktor",
];
const NOUNS: &[&str] = &[
    "river", "house", "garden", "letter", "window", "horse", "market", "village", "bridge", "lantern", "forest",
    "mountain", "harbor", "book", "table", "road", "field", "tower", "ship", "storm", "winter", "morning", "teacher",
    "farmer", "child", "doctor", "soldier", "merchant", "painter", "king", "queen", "clock", "mill", "well", "orchard",
    "valley", "station", "kitchen", "candle", "song", "door", "wall", "boat", "island", "castle", "meadow", "wagon",
    "shadow", "stone", "feather",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "small", "bright", "dark", "cold", "warm", "green", "narrow", "broad", "silent", "heavy", "gentle",
    "ancient", "distant", "hidden", "golden", "broken", "empty", "crowded", "strange", "simple", "tired", "clever",
    "proud",
];
const VERBS_PAST: &[&str] = &[
    "found",
    "crossed",
    "watched",
    "carried",
    "opened",
    "followed",
    "painted",
    "visited",
    "remembered",
    "built",
    "lost",
    "sold",
    "repaired",
    "closed",
    "described",
    "noticed",
    "guarded",
    "left",
    "reached",
    "praised",
];
const PLACES: &[&str] = &[
    "the north",
    "the coast",
    "the old town",
    "the hills",
    "the market square",
    "the far shore",
    "the capital",
    "the lake",
    "the edge of the forest",
    "the station",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "quickly",
    "carefully",
    "again",
    "alone",
    "together",
    "at dawn",
    "at night",
    "in silence",
    "without a word",
];
const CONNECTIVES: &[&str] = &["and then", "but", "because", "so", "while", "although"];

struct Lexicon {
    rng: ChaCha8Rng,
}

impl Lexicon {
    fn pick<'a>(&mut self, words: &[&'a str]) -> &'a str {
        // Zipf weights 1/(rank+1)
        let weights: Vec<f64> = (0..words.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        let dist = WeightedIndex::new(&weights).expect("non-empty word list");
        words[dist.sample(&mut self.rng)]
    }

    fn noun_phrase(&mut self) -> String {
        if self.rng.gen_bool(0.5) {
            format!("the {} {}", self.pick(ADJECTIVES), self.pick(NOUNS))
        } else {
            format!("the {}", self.pick(NOUNS))
        }
    }

    fn clause(&mut self) -> String {
        match self.rng.gen_range(0..6) {
            0 => format!(
                "{} {} {} near {}",
                self.noun_phrase(),
                self.pick(VERBS_PAST),
                self.noun_phrase(),
                self.pick(PLACES)
            ),
            1 => format!(
                "{} {} {} {}",
                self.pick(NAMES),
                self.pick(VERBS_PAST),
                self.noun_phrase(),
                self.pick(ADVERBS)
            ),
            2 => format!(
                "{} said that {} was {}",
                self.pick(NAMES),
                self.noun_phrase(),
                self.pick(ADJECTIVES)
            ),
            3 => {
                let n = self.rng.gen_range(2..40);
                format!(
                    "{} {} {n} {}s in {}",
                    self.pick(NAMES),
                    self.pick(VERBS_PAST),
                    self.pick(NOUNS),
                    self.pick(PLACES)
                )
            }
            4 => format!(
                "in {} {} {} {}",
                1700 + self.rng.gen_range(0..300),
                self.pick(NAMES),
                self.pick(VERBS_PAST),
                self.noun_phrase()
            ),
            _ => format!(
                "{} was {} and {}",
                self.noun_phrase(),
                self.pick(ADJECTIVES),
                self.pick(ADJECTIVES)
            ),
        }
    }

    fn sentence(&mut self) -> String {
        let mut s = self.clause();
        if self.rng.gen_bool(0.3) {
            s = format!("{s}, {} {}", self.pick(CONNECTIVES), self.clause());
        }
        let mut chars = s.chars();
        let first = chars.next().map(|c| c.to_ascii_uppercase()).unwrap_or(' ');
        let end = if self.rng.gen_bool(0.1) { "?" } else { "." };
        format!("{first}{}{end}", chars.as_str())
    }
}

/// Generates exactly `bytes` bytes of ASCII text.
pub fn synthesize_corpus(bytes: usize, seed: u64) -> String {
    let mut lex = Lexicon {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let sentences = lex.rng.gen_range(3..8);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&lex.sentence());
        }
        out.push('\n');
    }
    out.truncate(bytes);
    out
}
