//! Work-efficient (Blelloch) prefix scan over first-order linear recurrences.

/// The map `h ↦ mul·h + add`. Composition `first.then(second)` is
/// associative, which is what lets the recurrence be evaluated as a tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub mul: f64,
    pub add: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { mul: 1.0, add: 0.0 };

    /// Apply `self`, then `next`.
    #[inline]
    pub fn then(self, next: Affine) -> Affine {
        Affine {
            mul: self.mul * next.mul,
            add: next.mul * self.add + next.add,
        }
    }

    #[inline]
    pub fn apply(self, h: f64) -> f64 {
        self.mul * h + self.add
    }
}

/// In-place inclusive scan: afterwards `items[t]` is the composition of the
/// original `items[0..=t]`, so `items[t].add` is the state after step `t`
/// starting from zero.
///
/// Up-sweep builds subtree totals, down-sweep turns them into exclusive
/// prefixes; the inclusive result is each exclusive prefix followed by the
/// original element.
pub fn inclusive_scan(items: &mut [Affine]) {
    let n = items.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let mut tree = Vec::with_capacity(size);
    tree.extend_from_slice(items);
    tree.resize(size, Affine::IDENTITY);

    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = tree[i - stride].then(tree[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }

    tree[size - 1] = Affine::IDENTITY;
    let mut stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride];
            tree[i - stride] = tree[i];
            tree[i] = tree[i].then(left);
            i += 2 * stride;
        }
        stride /= 2;
    }

    for (item, prefix) in items.iter_mut().zip(&tree) {
        *item = prefix.then(*item);
    }
}
