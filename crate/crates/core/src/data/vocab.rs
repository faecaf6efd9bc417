//! Word and pseudo-phoneme vocabularies, pronunciation table and expression
//! templates.

use super::{Color, Motion, Shape};

/// Text vocabulary; a token id is the word's index.
pub const WORDS: &[&str] = &[
    "the", "a", "that", "is", "red", "green", "blue", "yellow", "square", "box", "circle", "ball",
    "triangle", "wedge", "moving", "going", "heading", "left", "right", "up", "down", "staying",
    "standing", "not", "still",
];

/// ARPAbet-style phoneme inventory followed by the filler tokens.
pub const PHONEMES: &[&str] = &[
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH", "<um>", "<uh>",
];

/// Number of leading non-filler phonemes.
pub const NUM_REAL_PHONEMES: usize = 39;

pub fn text_vocab_size() -> usize {
    WORDS.len()
}

pub fn audio_vocab_size() -> usize {
    PHONEMES.len()
}

pub fn is_filler(token: u32) -> bool {
    token as usize >= NUM_REAL_PHONEMES && (token as usize) < PHONEMES.len()
}

pub fn filler_tokens() -> impl Iterator<Item = u32> {
    (NUM_REAL_PHONEMES as u32)..(PHONEMES.len() as u32)
}

pub fn word_id(word: &str) -> Option<u32> {
    WORDS.iter().position(|w| *w == word).map(|i| i as u32)
}

fn phoneme_id(p: &str) -> u32 {
    PHONEMES
        .iter()
        .position(|q| *q == p)
        .unwrap_or_else(|| panic!("phoneme table has no `{p}`")) as u32
}

/// Pronunciation of a text token, `None` for ids outside the vocabulary.
pub fn pronounce(token: u32) -> Option<Vec<u32>> {
    let word = WORDS.get(token as usize)?;
    let phones: &str = match *word {
        "the" => "DH AH",
        "a" => "AH",
        "that" => "DH AE T",
        "is" => "IH Z",
        "red" => "R EH D",
        "green" => "G R IY N",
        "blue" => "B L UW",
        "yellow" => "Y EH L OW",
        "square" => "S K W EH R",
        "box" => "B AA K S",
        "circle" => "S ER K AH L",
        "ball" => "B AO L",
        "triangle" => "T R AY AE NG G AH L",
        "wedge" => "W EH JH",
        "moving" => "M UW V IH NG",
        "going" => "G OW IH NG",
        "heading" => "HH EH D IH NG",
        "left" => "L EH F T",
        "right" => "R AY T",
        "up" => "AH P",
        "down" => "D AW N",
        "staying" => "S T EY IH NG",
        "standing" => "S T AE N D IH NG",
        "not" => "N AA T",
        "still" => "S T IH L",
        _ => return None,
    };
    Some(phones.split(' ').map(phoneme_id).collect())
}

/// Number of paraphrase classes generated per object.
pub const NUM_PARAPHRASES: usize = 3;

fn color_word(c: Color) -> &'static str {
    match c {
        Color::Red => "red",
        Color::Green => "green",
        Color::Blue => "blue",
        Color::Yellow => "yellow",
    }
}

fn shape_word(s: Shape, alt: bool) -> &'static str {
    match (s, alt) {
        (Shape::Square, false) => "square",
        (Shape::Square, true) => "box",
        (Shape::Circle, false) => "circle",
        (Shape::Circle, true) => "ball",
        (Shape::Triangle, false) => "triangle",
        (Shape::Triangle, true) => "wedge",
    }
}

fn motion_words(m: Motion, class: usize) -> [&'static str; 2] {
    let verb = ["moving", "going", "heading"][class];
    match m {
        Motion::Left => [verb, "left"],
        Motion::Right => [verb, "right"],
        Motion::Up => [verb, "up"],
        Motion::Down => [verb, "down"],
        Motion::Still => [["staying", "still"], ["standing", "still"], ["not", "moving"]][class],
    }
}

/// Template sentence for paraphrase class `class` of an object.
pub fn describe(shape: Shape, color: Color, motion: Motion, class: usize) -> Vec<&'static str> {
    let [verb, dir] = motion_words(motion, class);
    match class {
        0 => vec!["the", color_word(color), shape_word(shape, false), verb, dir],
        1 => vec!["a", color_word(color), shape_word(shape, true), verb, dir],
        _ => vec!["the", shape_word(shape, false), "that", "is", color_word(color), verb, dir],
    }
}

/// Re-parses a templated sentence into the attributes it names.
pub fn parse_description(tokens: &[u32]) -> Option<(Shape, Color, Motion)> {
    let words: Vec<&str> = tokens.iter().map(|&t| WORDS.get(t as usize).copied()).collect::<Option<_>>()?;
    let mut shape = None;
    let mut color = None;
    let mut motion = None;
    for w in &words {
        match *w {
            "square" | "box" => shape = Some(Shape::Square),
            "circle" | "ball" => shape = Some(Shape::Circle),
            "triangle" | "wedge" => shape = Some(Shape::Triangle),
            "red" => color = Some(Color::Red),
            "green" => color = Some(Color::Green),
            "blue" => color = Some(Color::Blue),
            "yellow" => color = Some(Color::Yellow),
            "left" => motion = Some(Motion::Left),
            "right" => motion = Some(Motion::Right),
            "up" => motion = Some(Motion::Up),
            "down" => motion = Some(Motion::Down),
            "still" => motion = Some(Motion::Still),
            _ => {}
        }
    }
    if words.windows(2).any(|p| p == ["not", "moving"]) {
        motion = Some(Motion::Still);
    }
    Some((shape?, color?, motion?))
}
