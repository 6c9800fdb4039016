//! Corpus handling: loading, validation, train/val splitting, and a
//! deterministic synthetic play-script generator for offline runs.

use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::rng::SplitMix64;

/// The 65-character alphabet the models train over, in byte order.
pub const CHARSET: &str =
    "\n !$&',-.3:;?ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

/// Expected corpus size, give or take; validation uses a generous band.
pub const TARGET_BYTES: usize = 1_100_000;

/// Loads a corpus file and checks it looks like the expected dataset:
/// ASCII, drawn from the 65-character alphabet, roughly the right size.
/// `force` downgrades validation failures to pass-through.
pub fn load_corpus(path: &Path, force: bool) -> Result<String> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading corpus at {}", path.display()))?;
    match validate_corpus(&text) {
        Ok(()) => Ok(text),
        Err(e) if force => {
            eprintln!("warning: corpus validation skipped (--force): {e}");
            Ok(text)
        }
        Err(e) => Err(e).with_context(|| format!("corpus at {} failed validation", path.display())),
    }
}

/// Checks charset membership and size band.
pub fn validate_corpus(text: &str) -> Result<()> {
    if text.len() < TARGET_BYTES / 4 || text.len() > TARGET_BYTES * 4 {
        bail!(
            "corpus is {} bytes, expected within [{}, {}]",
            text.len(),
            TARGET_BYTES / 4,
            TARGET_BYTES * 4
        );
    }
    for (i, c) in text.chars().enumerate() {
        if !CHARSET.contains(c) {
            bail!("unexpected character {c:?} at offset {i}");
        }
    }
    let distinct = {
        let mut seen = [false; 128];
        for b in text.bytes() {
            seen[b as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 60 {
        bail!("corpus uses only {distinct} distinct characters, expected about 65");
    }
    Ok(())
}

/// Byte split into train and validation spans.
pub fn split_corpus(text: &str, train_frac: f64) -> (&str, &str) {
    assert!((0.0..1.0).contains(&train_frac));
    let cut = (text.len() as f64 * train_frac) as usize;
    text.split_at(cut)
}

const SPEAKERS: &[&str] = &[
    "DUKE", "QUEEN", "HERALD", "GARDENER", "FALCONER", "WIDOW", "CLERK",
    "BOATSWAIN", "PRINCESS", "JESTER", "SENTRY", "ABBESS", "TINKER", "ENVOY",
    "MAGISTRATE", "VIXEN", "ZEPHYR",
];

const ONSETS: &[&str] = &[
    "b", "br", "c", "ch", "cl", "d", "dr", "f", "fl", "g", "gr", "h", "j",
    "k", "l", "m", "n", "p", "pr", "qu", "r", "s", "sh", "sl", "st", "t",
    "th", "tr", "v", "w", "wh", "y", "z",
];

const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai", "oo", "ie"];

const CODAS: &[&str] = &[
    "", "n", "r", "s", "t", "l", "d", "m", "th", "st", "nd", "rd", "ck",
    "ng", "rn", "ss", "w", "ves", "ght", "x",
];

fn make_word(rng: &mut SplitMix64) -> String {
    let syllables = 1 + rng.next_below(3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.next_below(ONSETS.len())]);
        w.push_str(VOWELS[rng.next_below(VOWELS.len())]);
    }
    w.push_str(CODAS[rng.next_below(CODAS.len())]);
    w
}

fn sample_zipf(n: usize, rng: &mut SplitMix64) -> usize {
    // inverse-rank weighting gives a heavy-tailed, language-like histogram
    let u = rng.next_f64();
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let mut acc = 0.0;
    for k in 1..=n {
        acc += 1.0 / (k as f64 * h);
        if u < acc {
            return k - 1;
        }
    }
    n - 1
}

/// Deterministic pseudo-Elizabethan play script of roughly `target_bytes`
/// bytes over exactly the expected 65-character alphabet. Same seed, same
/// corpus, byte for byte.
pub fn synthetic_corpus(target_bytes: usize, seed: u64) -> String {
    let mut rng = SplitMix64::new(seed);
    // fixed lexicon so word statistics are stable within a corpus
    let lexicon: Vec<String> = (0..900).map(|_| make_word(&mut rng)).collect();
    let mut out = String::with_capacity(target_bytes + 256);
    let mut act = 1;
    let mut scene = 1;
    while out.len() < target_bytes {
        if scene == 1 {
            // the digit 3 is the only numeral in the alphabet
            out.push_str(&format!("ACT {}\n\n", "3".repeat(act.min(2))));
        }
        out.push_str(&format!("SCENE {}:\n", "3".repeat(scene.min(3))));
        let speeches = 4 + rng.next_below(6);
        for _ in 0..speeches {
            let sp = SPEAKERS[rng.next_below(SPEAKERS.len())];
            out.push_str(sp);
            out.push_str(":\n");
            let lines = 1 + rng.next_below(4);
            for _ in 0..lines {
                let words = 4 + rng.next_below(7);
                for wi in 0..words {
                    if wi > 0 {
                        out.push(' ');
                    }
                    let mut w = lexicon[sample_zipf(lexicon.len(), &mut rng)].clone();
                    if wi == 0 && rng.next_below(3) == 0 {
                        // sentence-style capitalization
                        let mut cs = w.chars();
                        if let Some(c) = cs.next() {
                            w = c.to_ascii_uppercase().to_string() + cs.as_str();
                        }
                    }
                    match rng.next_below(40) {
                        0 => w.push_str("'s"),
                        1 => {
                            w.push('-');
                            w.push_str(&lexicon[sample_zipf(lexicon.len(), &mut rng)]);
                        }
                        2 => w = format!("{w} & {}", lexicon[sample_zipf(lexicon.len(), &mut rng)]),
                        3 => w = format!("${w}"),
                        _ => {}
                    }
                    out.push_str(&w);
                }
                out.push(match rng.next_below(12) {
                    0 => '!',
                    1 => '?',
                    2 => ';',
                    3 => ':',
                    4 | 5 => ',',
                    _ => '.',
                });
                out.push('\n');
            }
            out.push('\n');
        }
        scene += 1;
        if scene > 5 {
            scene = 1;
            act += 1;
        }
    }
    out.truncate(target_bytes);
    out
}
