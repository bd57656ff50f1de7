//! Simplification of logical-form outputs: strips structural punctuation
//! and shortens variable references, leaving predicate words, argument
//! numbers, and clause separators.

/// Rewrites a logical-form token sequence by dropping `(`, `)`, and `,`,
/// and collapsing each three-token variable reference `x _ N` to `N`.
/// All other tokens (predicates, proper names, `AND`, `;`, `*`, `.`) pass
/// through unchanged. Sequences without punctuation or variables come back
/// identical.
pub fn simplify(output: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(output.len());
    let mut i = 0;
    while i < output.len() {
        let tok = output[i].as_str();
        match tok {
            "(" | ")" | "," => {
                i += 1;
            }
            "x" if i + 2 < output.len()
                && output[i + 1] == "_"
                && output[i + 2].chars().all(|c| c.is_ascii_digit())
                && !output[i + 2].is_empty() =>
            {
                out.push(output[i + 2].clone());
                i += 3;
            }
            _ => {
                out.push(output[i].clone());
                i += 1;
            }
        }
    }
    out
}
