//! Execution-based checks of partial plans against visible examples.
//!
//! These feed the step features: whether some completion of the open holes
//! can still reproduce each example's output (per example, approximate), and
//! whether one completion reproduces all of them (joint, exact, only when the
//! completion space is small).

use super::grammar::{Plan, SlotKind};
use crate::minilang::{BinOp, TestCase, Token};

/// Largest forward value set tracked before giving up on a subtree.
const SET_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reach {
    Yes,
    No,
    Unknown,
}

fn ops_at(plan: &Plan, i: usize) -> Vec<BinOp> {
    match plan.fill(i) {
        Some(Token::Op(op)) => vec![op],
        _ => BinOp::ALL.to_vec(),
    }
}

/// Every value the subtree at `i` can take over completions; `None` past the cap.
fn forward(plan: &Plan, i: usize, input: &[i64; 3]) -> Option<Vec<i128>> {
    let sk = plan.skeleton();
    match sk.slots()[i] {
        SlotKind::Leaf => {
            let mut v: Vec<i128> = match plan.fill(i) {
                Some(t) => vec![t.leaf_value(input)?],
                None => Token::leaves()
                    .iter()
                    .filter_map(|t| t.leaf_value(input))
                    .collect(),
            };
            v.sort_unstable();
            v.dedup();
            Some(v)
        }
        SlotKind::Op => {
            let (l, r) = sk.children(i)?;
            let a = forward(plan, l, input)?;
            let b = forward(plan, r, input)?;
            let ops = ops_at(plan, i);
            if ops.len() * a.len() * b.len() > SET_CAP * 4 {
                return None;
            }
            let mut out = Vec::with_capacity(ops.len() * a.len() * b.len());
            for op in ops {
                for &x in &a {
                    for &y in &b {
                        out.push(op.apply(x, y)?);
                    }
                }
            }
            out.sort_unstable();
            out.dedup();
            (out.len() <= SET_CAP).then_some(out)
        }
    }
}

/// Whether some `a` in `left` and `b` in `right` give `op(a, b) == target`.
/// Both slices are sorted.
fn combine_hits(op: BinOp, left: &[i128], right: &[i128], target: i128) -> bool {
    let has = |v: i128| right.binary_search(&v).is_ok();
    match op {
        BinOp::Add => left.iter().any(|&a| target.checked_sub(a).is_some_and(has)),
        BinOp::Sub => left.iter().any(|&a| a.checked_sub(target).is_some_and(has)),
        BinOp::Mul => left.iter().any(|&a| {
            if a == 0 {
                target == 0 && !right.is_empty()
            } else {
                target % a == 0 && has(target / a)
            }
        }),
        BinOp::Min => {
            let right_max = right.last().copied();
            let left_has = left.binary_search(&target).is_ok();
            (left_has && right_max.is_some_and(|m| m >= target))
                || (has(target) && left.last().is_some_and(|&m| m >= target))
        }
        BinOp::Max => {
            let right_min = right.first().copied();
            let left_has = left.binary_search(&target).is_ok();
            (left_has && right_min.is_some_and(|m| m <= target))
                || (has(target) && left.first().is_some_and(|&m| m <= target))
        }
    }
}

/// Can some completion of `plan` map `case.input` to `case.output`?
pub fn reachable(plan: &Plan, case: &TestCase) -> Reach {
    let sk = plan.skeleton();
    let target = case.output;
    match sk.children(0) {
        None => match forward(plan, 0, &case.input) {
            Some(v) if v.binary_search(&target).is_ok() => Reach::Yes,
            Some(_) => Reach::No,
            None => Reach::Unknown,
        },
        Some((l, r)) => {
            let (Some(a), Some(b)) = (forward(plan, l, &case.input), forward(plan, r, &case.input))
            else {
                return Reach::Unknown;
            };
            if ops_at(plan, 0)
                .into_iter()
                .any(|op| combine_hits(op, &a, &b, target))
            {
                Reach::Yes
            } else {
                Reach::No
            }
        }
    }
}

/// Evaluates a complete preorder token sequence.
pub fn eval_preorder(tokens: &[Token], input: &[i64; 3]) -> Option<i128> {
    fn go(tokens: &[Token], pos: &mut usize, input: &[i64; 3]) -> Option<i128> {
        let t = *tokens.get(*pos)?;
        *pos += 1;
        match t {
            Token::Op(op) => {
                let a = go(tokens, pos, input)?;
                let b = go(tokens, pos, input)?;
                op.apply(a, b)
            }
            leaf => leaf.leaf_value(input),
        }
    }
    let mut pos = 0;
    go(tokens, &mut pos, input)
}

/// Exact check: does one completion reproduce every case? `None` when the
/// completion space exceeds `budget`.
pub fn joint_consistent(plan: &Plan, cases: &[TestCase], budget: u64) -> Option<bool> {
    let holes: Vec<usize> = plan.open_holes().collect();
    let choices: Vec<Vec<Token>> = holes
        .iter()
        .map(|&h| plan.skeleton().slots()[h].fillers())
        .collect();
    let space = choices
        .iter()
        .try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64))?;
    if space > budget {
        return None;
    }
    let mut tokens = plan.default_completion();
    let mut digits = vec![0usize; holes.len()];
    loop {
        for (k, &h) in holes.iter().enumerate() {
            tokens[h] = choices[k][digits[k]];
        }
        if cases
            .iter()
            .all(|c| eval_preorder(&tokens, &c.input) == Some(c.output))
        {
            return Some(true);
        }
        // Odometer increment over the open holes.
        let mut k = 0;
        loop {
            if k == digits.len() {
                return Some(false);
            }
            digits[k] += 1;
            if digits[k] < choices[k].len() {
                break;
            }
            digits[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minilang::tokenize;
    use crate::policy::grammar::Skeleton;

    fn plan(skel: &str, fills: &[(usize, &str)]) -> Plan {
        let mut p = Plan::new(skel.parse::<Skeleton>().unwrap());
        for &(h, f) in fills {
            p = p.with_fill(h, f.parse().unwrap()).unwrap();
        }
        p
    }

    fn case(input: [i64; 3], output: i128) -> TestCase {
        TestCase { input, output }
    }

    // Brute-force oracle: enumerate every completion.
    fn brute_reach(p: &Plan, c: &TestCase) -> bool {
        joint_consistent(p, std::slice::from_ref(c), u64::MAX).unwrap()
    }

    #[test]
    fn reach_matches_brute_force_on_depth_two() {
        let plans = [
            plan("? _ _", &[]),
            plan("? _ _", &[(0, "*")]),
            plan("? ? _ _ _", &[(0, "min")]),
            plan("? ? _ _ ? _ _", &[(1, "-"), (6, "2")]),
            plan("? _ ? _ _", &[(0, "max"), (3, "x2")]),
        ];
        let inputs = [[1, -2, 3], [0, 0, 0], [-5, 4, 5], [2, 2, -1]];
        for p in &plans {
            for input in inputs {
                for out in -40..=40 {
                    let c = case(input, out);
                    let expect = brute_reach(p, &c);
                    assert_eq!(
                        reachable(p, &c) == Reach::Yes,
                        expect,
                        "plan {p:?} case {c:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn joint_is_exact_and_bounded() {
        let p = plan("? _ _", &[(0, "+")]);
        let cases = [case([1, 2, 0], 3), case([4, -1, 0], 3)];
        assert_eq!(joint_consistent(&p, &cases, 64), Some(true));
        let bad = [case([1, 2, 0], 3), case([4, -1, 0], 100)];
        assert_eq!(joint_consistent(&p, &bad, 64), Some(false));
        assert_eq!(joint_consistent(&plan("? _ _", &[]), &cases, 64), None);
    }

    #[test]
    fn preorder_eval() {
        let t = tokenize("max * x0 x1 -2").unwrap();
        assert_eq!(eval_preorder(&t, &[3, -1, 0]), Some(-2));
        assert_eq!(eval_preorder(&t[..3], &[3, -1, 0]), None);
    }
}
