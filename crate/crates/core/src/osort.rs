//! Batcher's bitonic sorting network over packed gradient cells.
//!
//! The sequence of compared cell pairs depends only on the array length, and
//! every comparator performs exactly one [`o_swap`], so the network's access
//! pattern is the same for every input of a given length. Not stable.

use crate::error::{Error, Result};
use crate::primitives::{ct_gt_u32, o_swap, CtWord};
use crate::trace::{TraceSink, TracedArray};

/// Sort key. Only ascending by index exists; the sentinel index `u32::MAX`
/// sorts after every real index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SortKeyOrder {
    #[default]
    ByIndex,
}

/// Visits every comparator of the network for `len` cells in execution
/// order. Each pair is `(lo, hi)`: after the comparator, the smaller key is
/// at `lo`.
#[inline(always)]
fn for_each_comparator(len: usize, mut f: impl FnMut(usize, usize)) {
    let mut block = 2;
    while block <= len {
        let mut stride = block / 2;
        while stride > 0 {
            for i in 0..len {
                let partner = i ^ stride;
                if partner > i {
                    // Direction depends on position only.
                    if i & block == 0 {
                        f(i, partner);
                    } else {
                        f(partner, i);
                    }
                }
            }
            stride /= 2;
        }
        block *= 2;
    }
}

fn check_len(len: usize) -> Result<()> {
    if len.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::NotPowerOfTwo(len))
    }
}

/// The network's comparator list for a power-of-two `len`.
pub fn comparator_schedule(len: usize) -> Result<Vec<(usize, usize)>> {
    check_len(len)?;
    let mut out = Vec::with_capacity(comparator_count(len));
    for_each_comparator(len, |lo, hi| out.push((lo, hi)));
    Ok(out)
}

/// `(n/2) * log2(n) * (log2(n) + 1) / 2` for a power-of-two `n`.
pub fn comparator_count(len: usize) -> usize {
    if len < 2 {
        return 0;
    }
    let lg = len.trailing_zeros() as usize;
    len / 2 * lg * (lg + 1) / 2
}

/// Compare-exchange on indices, branch-free.
#[inline(always)]
pub fn compare_exchange(lo: CtWord, hi: CtWord) -> (CtWord, CtWord) {
    o_swap(ct_gt_u32(lo.index(), hi.index()), lo, hi)
}

/// Sorts `cells` ascending by index in place. Each comparator is traced as
/// read lo, read hi, write lo, write hi.
pub fn bitonic_sort<S: TraceSink>(cells: &mut TracedArray<'_, CtWord, S>, order: SortKeyOrder) -> Result<()> {
    let SortKeyOrder::ByIndex = order;
    check_len(cells.len())?;
    let len = cells.len();
    let mut mem = cells.lease();
    for_each_comparator(len, |lo, hi| {
        let a = mem.read(lo);
        let b = mem.read(hi);
        let (a, b) = compare_exchange(a, b);
        mem.write(lo, a);
        mem.write(hi, b);
    });
    Ok(())
}
