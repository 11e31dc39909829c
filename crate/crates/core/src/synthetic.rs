//! Small template dialog corpus whose responses are a fixed function of the
//! query, written in the `__eou__` line format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialog, TURN_SEPARATOR};
use crate::error::{Error, Result};

const NUMBERS: [&str; 19] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
];

const COLORS: [(&str, &str); 12] = [
    ("apple", "red"),
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("banana", "yellow"),
    ("rose", "red"),
    ("ocean", "blue"),
    ("lemon", "yellow"),
    ("cherry", "red"),
    ("cloud", "grey"),
    ("leaf", "green"),
];

const PEOPLE: [(&str, &str, &str, &str); 12] = [
    ("anna", "paris", "pasta", "thirty"),
    ("ben", "london", "rice", "twelve"),
    ("carl", "berlin", "soup", "forty"),
    ("dora", "rome", "bread", "nine"),
    ("emil", "madrid", "fish", "fifty"),
    ("fay", "oslo", "cake", "twenty"),
    ("gus", "vienna", "eggs", "sixty"),
    ("hana", "tokyo", "noodles", "eight"),
    ("ivan", "moscow", "pasta", "seventy"),
    ("jill", "dublin", "soup", "eleven"),
    ("kai", "lima", "rice", "thirty"),
    ("lea", "cairo", "bread", "forty"),
];

const ANIMALS: [(&str, &str); 10] = [
    ("cat", "meow"),
    ("dog", "woof"),
    ("cow", "moo"),
    ("duck", "quack"),
    ("sheep", "baa"),
    ("owl", "hoot"),
    ("pig", "oink"),
    ("horse", "neigh"),
    ("frog", "ribbit"),
    ("lion", "roar"),
];

/// One query and its deterministic response.
pub fn sample_pair(rng: &mut impl Rng) -> (String, String) {
    match rng.gen_range(0..6) {
        0 => {
            let (obj, color) = COLORS.choose(rng).expect("non-empty");
            (format!("what color is the {obj}"), format!("the {obj} is {color}"))
        }
        1 => {
            let (name, city, _, _) = PEOPLE.choose(rng).expect("non-empty");
            (format!("where does {name} live"), format!("{name} lives in {city}"))
        }
        2 => {
            let (name, _, food, _) = PEOPLE.choose(rng).expect("non-empty");
            (format!("what does {name} like to eat"), format!("{name} likes {food}"))
        }
        3 => {
            let (name, _, _, age) = PEOPLE.choose(rng).expect("non-empty");
            (format!("how old is {name}"), format!("{name} is {age} years old"))
        }
        4 => {
            let (animal, sound) = ANIMALS.choose(rng).expect("non-empty");
            (format!("what does a {animal} say"), format!("a {animal} says {sound}"))
        }
        _ => {
            let a = rng.gen_range(0..10);
            let b = rng.gen_range(0..10);
            (
                format!("what is {} plus {}", NUMBERS[a], NUMBERS[b]),
                format!("{} plus {} is {}", NUMBERS[a], NUMBERS[b], NUMBERS[a + b]),
            )
        }
    }
}

/// `n` dialogs of one or two query/response exchanges.
pub fn generate(n: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let exchanges = rng.gen_range(1..=2);
            let mut turns = Vec::with_capacity(2 * exchanges);
            for _ in 0..exchanges {
                let (q, r) = sample_pair(&mut rng);
                turns.push(q);
                turns.push(r);
            }
            Dialog { turns }
        })
        .collect()
}

pub fn format_dialog(d: &Dialog) -> String {
    let mut line = String::new();
    for t in &d.turns {
        let _ = write!(line, "{t} {TURN_SEPARATOR} ");
    }
    line.trim_end().to_string()
}

/// Writes `train.txt`, `valid.txt` and `test.txt` (80/10/10 split) into
/// `dir`. Returns the three dialog counts.
pub fn write_corpus(dir: &Path, dialogs: usize, seed: u64) -> Result<[usize; 3]> {
    if dialogs < 10 {
        return Err(Error::Config("synthetic corpus needs at least 10 dialogs".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let all = generate(dialogs, seed);
    let n_valid = dialogs / 10;
    let n_train = dialogs - 2 * n_valid;
    let parts = [
        ("train.txt", &all[..n_train]),
        ("valid.txt", &all[n_train..n_train + n_valid]),
        ("test.txt", &all[n_train + n_valid..]),
    ];
    for (name, part) in parts {
        let text: String = part.iter().map(|d| format_dialog(d) + "\n").collect();
        crate::checkpoint::write_atomic(&dir.join(name), text.as_bytes())?;
    }
    Ok([n_train, n_valid, dialogs - n_train - n_valid])
}
