//! Thread-local operation counter.
//!
//! Every tensor operation reports its cost here: convolutions report
//! `2·k²·Cin·Cout·Hout·Wout` multiply-adds plus one add per output for the
//! bias, pooling one op per input element, and everything else one op per
//! output element. Pure data movement (reshape, concat, slicing) is free.
//! Counting is off unless a caller is inside [`count`].

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(ops: u64) {
    COUNTER.with(|c| {
        if let Some(total) = c.get() {
            c.set(Some(total + ops));
        }
    });
}

/// Runs `f` and returns its result with the number of operations it issued
/// on this thread. Nested calls report only their own span.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let inner = COUNTER.with(|c| c.get()).unwrap_or(0);
    COUNTER.with(|c| c.set(outer.map(|o| o + inner)));
    (out, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_counts() {
        let ((_, inner), outer) = count(|| {
            record(3);
            count(|| record(4))
        });
        assert_eq!(inner, 4);
        assert_eq!(outer, 7);
    }

    #[test]
    fn disabled_outside_count() {
        record(10);
        let (_, n) = count(|| ());
        assert_eq!(n, 0);
    }
}
