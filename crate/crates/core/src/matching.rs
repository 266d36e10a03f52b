use std::ops::Range;

/// Case-insensitive occurrences of `needle` in `haystack` with non-alphanumeric
/// (or string-edge) neighbours. Offsets index the lower-cased haystack.
pub(crate) fn word_occurrences(haystack_lower: &str, needle: &str) -> Vec<Range<usize>> {
    let needle = needle.to_lowercase();
    if needle.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack_lower[from..].find(&needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = haystack_lower[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack_lower[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            out.push(start..end);
        }
        from = start + haystack_lower[start..].chars().next().map_or(1, char::len_utf8);
    }
    out
}
