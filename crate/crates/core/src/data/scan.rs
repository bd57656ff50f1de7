//! SCAN command language: corpus generation from the phrase grammar, the
//! compressed output representation used for training, and its decoder.
//!
//! Two encoders exist on purpose. [`encode`] renders the compressed form
//! from the parsed command and reproduces the published corpus statistics;
//! [`compress`] works from the action sequence alone with no access to the
//! command. Both produce sequences that [`decode`] maps back exactly.

use super::DataError;

const ACTION_WORDS: [(&str, &str); 4] =
    [("walk", "WALK"), ("look", "LOOK"), ("run", "RUN"), ("jump", "JUMP")];
const DIRECTIONS: [(&str, &str); 2] = [("left", "LTURN"), ("right", "RTURN")];

fn action(word: &str) -> &'static str {
    ACTION_WORDS.iter().find(|(w, _)| *w == word).map(|(_, a)| *a).expect("action word")
}

fn turn(dir: &str) -> &'static str {
    DIRECTIONS.iter().find(|(w, _)| *w == dir).map(|(_, t)| *t).expect("direction word")
}

fn is_action_word(word: &str) -> bool {
    ACTION_WORDS.iter().any(|(w, _)| *w == word)
}

fn is_direction(word: &str) -> bool {
    DIRECTIONS.iter().any(|(w, _)| *w == word)
}

/// A verb phrase: an action word or `turn`, optionally directed or wrapped
/// in `opposite`/`around`, optionally repeated by `twice`/`thrice`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phrase {
    words: Vec<&'static str>,
    repeat: usize,
}

/// A full command: one phrase, or two joined by `and`/`after`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Single(Phrase),
    Pair(Phrase, &'static str, Phrase),
}

fn verb_variants() -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    for (u, _) in ACTION_WORDS {
        out.push(vec![u]);
    }
    for (u, _) in ACTION_WORDS {
        for (d, _) in DIRECTIONS {
            out.push(vec![u, d]);
        }
    }
    for (d, _) in DIRECTIONS {
        out.push(vec!["turn", d]);
    }
    for kw in ["opposite", "around"] {
        for (u, _) in ACTION_WORDS {
            for (d, _) in DIRECTIONS {
                out.push(vec![u, kw, d]);
            }
        }
        for (d, _) in DIRECTIONS {
            out.push(vec!["turn", kw, d]);
        }
    }
    out
}

fn phrases() -> Vec<Phrase> {
    let mut out = Vec::new();
    for words in verb_variants() {
        out.push(Phrase { words: words.clone(), repeat: 1 });
        out.push(Phrase { words: words.clone(), repeat: 2 });
        out.push(Phrase { words, repeat: 3 });
    }
    out
}

/// Every SCAN command: 102 phrases alone plus all ordered pairs under the
/// two conjunctions, 20,910 in total.
pub fn corpus() -> Vec<Command> {
    let ps = phrases();
    let mut out: Vec<Command> = ps.iter().cloned().map(Command::Single).collect();
    for conj in ["and", "after"] {
        for a in &ps {
            for b in &ps {
                out.push(Command::Pair(a.clone(), conj, b.clone()));
            }
        }
    }
    out
}

impl Phrase {
    fn input_words(&self) -> Vec<&'static str> {
        let mut words = self.words.clone();
        match self.repeat {
            1 => {}
            2 => words.push("twice"),
            3 => words.push("thrice"),
            _ => unreachable!("grammar only repeats twice or thrice"),
        }
        words
    }

    fn raw_verb(&self) -> Vec<&'static str> {
        match self.words.as_slice() {
            [u] => vec![action(u)],
            ["turn", d] => vec![turn(d)],
            [u, d] => vec![turn(d), action(u)],
            ["turn", "opposite", d] => vec![turn(d); 2],
            [u, "opposite", d] => vec![turn(d), turn(d), action(u)],
            ["turn", "around", d] => vec![turn(d); 4],
            [u, "around", d] => [turn(d), action(u)].repeat(4),
            _ => unreachable!("grammar produces no other shapes"),
        }
    }

    fn raw(&self) -> Vec<&'static str> {
        self.raw_verb().repeat(self.repeat)
    }

    fn compressed_verb(&self) -> Vec<String> {
        let toks: Vec<&str> = match self.words.as_slice() {
            [u] => vec![action(u)],
            ["turn", d] => vec![turn(d)],
            [u, d] => vec![turn(d), "+", action(u)],
            ["turn", "opposite", d] => vec![turn(d), "*", "2"],
            [u, "opposite", d] => vec![turn(d), "*", "2", "+", action(u)],
            ["turn", "around", d] => vec![turn(d), "*", "4"],
            [u, "around", d] => vec!["(", turn(d), action(u), ")", "*", "4"],
            _ => unreachable!("grammar produces no other shapes"),
        };
        toks.into_iter().map(str::to_string).collect()
    }

    fn compressed(&self) -> Vec<String> {
        let verb = self.compressed_verb();
        if self.repeat == 1 {
            return verb;
        }
        let n = self.repeat.to_string();
        if verb.len() == 1 || verb[0] == "(" {
            // A lone token repeats directly; a parenthesized group chains
            // another multiplier onto the group.
            let mut out = verb;
            out.push("*".into());
            out.push(n);
            return out;
        }
        // Wrap in parentheses; the joiner is redundant inside a group.
        let mut out = vec!["(".to_string()];
        out.extend(verb.into_iter().filter(|t| t != "+"));
        out.push(")".into());
        out.push("*".into());
        out.push(n);
        out
    }
}

impl Command {
    pub fn input_tokens(&self) -> Vec<String> {
        let words = match self {
            Command::Single(p) => p.input_words(),
            Command::Pair(a, conj, b) => {
                let mut w = a.input_words();
                w.push(conj);
                w.extend(b.input_words());
                w
            }
        };
        words.into_iter().map(str::to_string).collect()
    }

    /// The uncompressed action sequence. `after` executes its second phrase
    /// first.
    pub fn raw_output(&self) -> Vec<String> {
        let toks = match self {
            Command::Single(p) => p.raw(),
            Command::Pair(a, "and", b) => {
                let mut t = a.raw();
                t.extend(b.raw());
                t
            }
            Command::Pair(a, "after", b) => {
                let mut t = b.raw();
                t.extend(a.raw());
                t
            }
            Command::Pair(..) => unreachable!("grammar has exactly two conjunctions"),
        };
        toks.into_iter().map(str::to_string).collect()
    }

    /// The compressed output, rendered phrase by phrase and joined with `+`
    /// in execution order.
    pub fn compressed_output(&self) -> Vec<String> {
        match self {
            Command::Single(p) => p.compressed(),
            Command::Pair(a, conj, b) => {
                let (first, second) =
                    if *conj == "after" { (b, a) } else { (a, b) };
                let mut t = first.compressed();
                t.push("+".into());
                t.extend(second.compressed());
                t
            }
        }
    }
}

fn parse_verb(words: &[&'static str]) -> Result<Vec<&'static str>, DataError> {
    let ok = match words {
        [u] => is_action_word(u),
        [u, d] => (is_action_word(u) || *u == "turn") && is_direction(d),
        [u, kw, d] => {
            (is_action_word(u) || *u == "turn")
                && (*kw == "opposite" || *kw == "around")
                && is_direction(d)
        }
        _ => false,
    };
    if ok {
        Ok(words.to_vec())
    } else {
        Err(DataError::Parse {
            line: 0,
            reason: format!("not a command verb phrase: {}", words.join(" ")),
        })
    }
}

fn parse_phrase(words: &[&'static str]) -> Result<Phrase, DataError> {
    match words.split_last() {
        Some((&"twice", rest)) => Ok(Phrase { words: parse_verb(rest)?, repeat: 2 }),
        Some((&"thrice", rest)) => Ok(Phrase { words: parse_verb(rest)?, repeat: 3 }),
        _ => Ok(Phrase { words: parse_verb(words)?, repeat: 1 }),
    }
}

const INPUT_WORDS: [&str; 13] = [
    "walk", "look", "run", "jump", "turn", "left", "right", "opposite", "around", "twice",
    "thrice", "and", "after",
];

/// Parses whitespace tokens into a [`Command`].
pub fn parse(tokens: &[String]) -> Result<Command, DataError> {
    let mut words = Vec::with_capacity(tokens.len());
    for t in tokens {
        let word = INPUT_WORDS
            .iter()
            .find(|w| *w == t)
            .copied()
            .ok_or_else(|| DataError::Parse {
                line: 0,
                reason: format!("unknown command word {t}"),
            })?;
        words.push(word);
    }
    let conj_at = words.iter().position(|w| *w == "and" || *w == "after");
    match conj_at {
        None => Ok(Command::Single(parse_phrase(&words)?)),
        Some(i) => {
            let a = parse_phrase(&words[..i])?;
            let b = parse_phrase(&words[i + 1..])?;
            Ok(Command::Pair(a, words[i], b))
        }
    }
}

/// Compressed output for a raw command input; the trained pipeline's
/// preprocessing direction.
pub fn encode(input_tokens: &[String]) -> Result<Vec<String>, DataError> {
    Ok(parse(input_tokens)?.compressed_output())
}

/// Maps the original dataset's `I_*` action names onto the short names used
/// here; short names pass through.
pub fn normalize_actions(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| {
            match t.as_str() {
                "I_WALK" => "WALK",
                "I_LOOK" => "LOOK",
                "I_RUN" => "RUN",
                "I_JUMP" => "JUMP",
                "I_TURN_LEFT" => "LTURN",
                "I_TURN_RIGHT" => "RTURN",
                other => other,
            }
            .to_string()
        })
        .collect()
}

/// Compresses an action sequence with no access to the command: scans left
/// to right, and at each position takes the consecutive repetition covering
/// the longest span (ties go to the shortest block, hence the highest
/// count). A multi-token block becomes `( BLOCK ) * n`, a single token
/// `TOK * n`; units are joined with `+`.
pub fn compress(output: &[String]) -> Vec<String> {
    let n = output.len();
    let mut units: Vec<Vec<String>> = Vec::new();
    let mut pos = 0;
    while pos < n {
        let mut best: Option<(usize, usize)> = None;
        for block in 1..=(n - pos) / 2 {
            let mut count = 1;
            while pos + (count + 1) * block <= n
                && output[pos + count * block..pos + (count + 1) * block]
                    == output[pos..pos + block]
            {
                count += 1;
            }
            if count < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, c)) => block * count > b * c,
            };
            if better {
                best = Some((block, count));
            }
        }
        match best {
            Some((block, count)) => {
                let mut unit = Vec::new();
                if block == 1 {
                    unit.push(output[pos].clone());
                } else {
                    unit.push("(".into());
                    unit.extend(output[pos..pos + block].iter().cloned());
                    unit.push(")".into());
                }
                unit.push("*".into());
                unit.push(count.to_string());
                units.push(unit);
                pos += block * count;
            }
            None => {
                units.push(vec![output[pos].clone()]);
                pos += 1;
            }
        }
    }
    let mut out = Vec::new();
    for (i, unit) in units.into_iter().enumerate() {
        if i > 0 {
            out.push("+".into());
        }
        out.extend(unit);
    }
    out
}

/// Expands a compressed sequence back to the raw action sequence.
///
/// Grammar: `expr := item+` with `+` as a skippable separator;
/// `item := atom ('*' INT)*`; `atom := TOKEN | '(' expr ')'`.
pub fn decode(ir: &[String]) -> Result<Vec<String>, DataError> {
    let mut pos = 0;
    let out = decode_group(ir, &mut pos, false)?;
    if pos != ir.len() {
        return Err(DataError::Decode { position: pos, reason: "unmatched )".into() });
    }
    if out.is_empty() {
        return Err(DataError::Decode { position: 0, reason: "empty sequence".into() });
    }
    Ok(out)
}

fn decode_group(
    toks: &[String],
    pos: &mut usize,
    inside_parens: bool,
) -> Result<Vec<String>, DataError> {
    let mut out = Vec::new();
    while *pos < toks.len() {
        let block = match toks[*pos].as_str() {
            "+" => {
                *pos += 1;
                continue;
            }
            ")" => {
                if !inside_parens {
                    return Err(DataError::Decode {
                        position: *pos,
                        reason: "unmatched )".into(),
                    });
                }
                break;
            }
            "(" => {
                let open = *pos;
                *pos += 1;
                let inner = decode_group(toks, pos, true)?;
                if toks.get(*pos).map(String::as_str) != Some(")") {
                    return Err(DataError::Decode {
                        position: open,
                        reason: "missing )".into(),
                    });
                }
                if inner.is_empty() {
                    return Err(DataError::Decode {
                        position: open,
                        reason: "empty group".into(),
                    });
                }
                *pos += 1;
                inner
            }
            "*" => {
                return Err(DataError::Decode {
                    position: *pos,
                    reason: "multiplier without a preceding block".into(),
                });
            }
            tok => {
                *pos += 1;
                vec![tok.to_string()]
            }
        };
        let mut block = block;
        while toks.get(*pos).map(String::as_str) == Some("*") {
            let count: usize = toks
                .get(*pos + 1)
                .and_then(|t| t.parse().ok())
                .filter(|&c| c >= 1)
                .ok_or_else(|| DataError::Decode {
                    position: *pos,
                    reason: "multiplier needs a positive count".into(),
                })?;
            let mut repeated = Vec::with_capacity(block.len() * count);
            for _ in 0..count {
                repeated.extend(block.iter().cloned());
            }
            block = repeated;
            *pos += 2;
        }
        out.extend(block);
    }
    if inside_parens && *pos >= toks.len() {
        return Err(DataError::Decode { position: toks.len(), reason: "missing )".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn corpus_enumerates_all_commands() {
        // 102 phrases alone + 2 conjunctions * 102^2 ordered pairs
        assert_eq!(corpus().len(), 102 + 2 * 102 * 102);
    }

    #[test]
    fn repeated_action_compresses_to_starred_token() {
        let cmd = parse(&toks("run twice")).unwrap();
        assert_eq!(cmd.raw_output(), toks("RUN RUN"));
        assert_eq!(cmd.compressed_output(), toks("RUN * 2"));
    }

    #[test]
    fn after_swaps_phrase_order() {
        let cmd = parse(&toks("jump after run")).unwrap();
        assert_eq!(cmd.raw_output(), toks("RUN JUMP"));
        assert_eq!(cmd.compressed_output(), toks("RUN + JUMP"));
    }

    #[test]
    fn around_phrase_groups_turn_and_action() {
        let cmd = parse(&toks("jump around right")).unwrap();
        assert_eq!(cmd.raw_output(), toks("RTURN JUMP RTURN JUMP RTURN JUMP RTURN JUMP"));
        assert_eq!(cmd.compressed_output(), toks("( RTURN JUMP ) * 4"));
    }

    #[test]
    fn conjunction_joins_compressed_phrases() {
        let cmd = parse(&toks("jump around right and walk twice")).unwrap();
        assert_eq!(
            cmd.raw_output(),
            toks("RTURN JUMP RTURN JUMP RTURN JUMP RTURN JUMP WALK WALK")
        );
        assert_eq!(cmd.compressed_output(), toks("( RTURN JUMP ) * 4 + WALK * 2"));
    }

    #[test]
    fn repeated_group_chains_multipliers() {
        let cmd = parse(&toks("walk around left twice")).unwrap();
        assert_eq!(cmd.compressed_output(), toks("( LTURN WALK ) * 4 * 2"));
        assert_eq!(decode(&cmd.compressed_output()).unwrap(), cmd.raw_output());
    }

    #[test]
    fn repeated_joined_phrase_drops_joiner_inside_group() {
        let cmd = parse(&toks("walk left thrice")).unwrap();
        assert_eq!(cmd.compressed_output(), toks("( LTURN WALK ) * 3"));
    }

    #[test]
    fn bare_turn_modifiers_stay_flat() {
        assert_eq!(encode(&toks("turn opposite left")).unwrap(), toks("LTURN * 2"));
        assert_eq!(encode(&toks("turn around right")).unwrap(), toks("RTURN * 4"));
        assert_eq!(encode(&toks("turn left")).unwrap(), toks("LTURN"));
    }

    #[test]
    fn parse_rejects_unknown_words() {
        assert!(parse(&toks("jump sideways")).is_err());
        assert!(parse(&toks("dax twice")).is_err());
    }

    #[test]
    fn compress_repeats_single_token() {
        assert_eq!(compress(&toks("RUN RUN")), toks("RUN * 2"));
    }

    #[test]
    fn compress_joins_distinct_tokens() {
        assert_eq!(compress(&toks("RUN JUMP")), toks("RUN + JUMP"));
    }

    #[test]
    fn compress_prefers_shortest_block_on_equal_span() {
        // The eight tokens also read as a 4-token block repeated twice; the
        // 2-token block wins because it yields the higher count.
        assert_eq!(
            compress(&toks("RTURN JUMP RTURN JUMP RTURN JUMP RTURN JUMP WALK WALK")),
            toks("( RTURN JUMP ) * 4 + WALK * 2")
        );
    }

    #[test]
    fn compress_handles_run_starting_mid_sequence() {
        assert_eq!(compress(&toks("WALK RTURN RTURN RTURN")), toks("WALK + RTURN * 3"));
    }

    #[test]
    fn decode_expands_starred_tokens_and_groups() {
        assert_eq!(decode(&toks("RUN * 2")).unwrap(), toks("RUN RUN"));
        assert_eq!(
            decode(&toks("( RTURN JUMP ) * 4")).unwrap(),
            toks("RTURN JUMP RTURN JUMP RTURN JUMP RTURN JUMP")
        );
    }

    #[test]
    fn decode_rejects_malformed_sequences() {
        assert!(decode(&toks("( WALK")).is_err());
        assert!(decode(&toks("WALK )")).is_err());
        assert!(decode(&toks("WALK *")).is_err());
        assert!(decode(&toks("* 2")).is_err());
        assert!(decode(&toks("WALK * 0")).is_err());
        assert!(decode(&toks("( ) * 2")).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn compress_round_trips_on_random_action_strings() {
        // Adversarial inputs the grammar never produces must still round-trip.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let alphabet = ["WALK", "LOOK", "RUN", "JUMP", "LTURN", "RTURN"];
        for _ in 0..1000 {
            let len = rng.gen_range(1..=30);
            let seq: Vec<String> = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string())
                .collect();
            let ir = compress(&seq);
            assert_eq!(decode(&ir).unwrap(), seq, "failed on {seq:?} -> {ir:?}");
        }
    }

    #[test]
    fn normalize_maps_original_action_names() {
        assert_eq!(
            normalize_actions(&toks("I_TURN_LEFT I_JUMP WALK")),
            toks("LTURN JUMP WALK")
        );
    }
}
