//! Covering designs over attributes, plus attribute-join planning.
//!
//! A covering design C(v, k, t) is a family of attribute blocks such that
//! every t-subset of the v attributes is contained in at least one block. The
//! estimator trains one tensor model per block, so any query touching at most
//! t attributes can be answered from a single block; wider queries are fused
//! across several.
//!
//! Blocks here carry a *domain budget* instead of a fixed size k: a block is
//! admissible when the product of its member domain sizes stays at or below
//! `m_k`, since that product is exactly the dense tensor volume the block
//! costs to train.

use std::collections::BTreeSet;

use thiserror::Error;

/// Enumerating more t-subsets than this is refused outright.
pub const SUBSET_ENUMERATION_GUARD: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum CoveringError {
    #[error("t must satisfy 1 <= t <= v (got t={t}, v={v})")]
    BadStrength { t: usize, v: usize },
    #[error("enumerating C({v},{t}) = {count} t-subsets exceeds the guard {guard}")]
    TooManySubsets {
        v: usize,
        t: usize,
        count: u128,
        guard: u128,
    },
    #[error(
        "design is infeasible: t-subset {subset:?} alone has domain volume {volume}, \
         above the budget {m_k}"
    )]
    Infeasible {
        subset: Vec<usize>,
        volume: u128,
        m_k: u128,
    },
    #[error("design does not cover {count} t-subsets (first: {first:?})")]
    Uncovered { count: usize, first: Vec<usize> },
    #[error("design line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("domain list must be non-empty with no zero-size domain")]
    BadDomains,
    #[error("block member {member} out of range for {v} attributes")]
    MemberRange { member: usize, v: usize },
}

/// One attribute block: a sorted set of 0-based attribute indices.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Block {
    pub members: Vec<usize>,
}

impl Block {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        Block { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, attr: usize) -> bool {
        self.members.binary_search(&attr).is_ok()
    }

    /// Product of the member domain sizes: the dense volume of this block.
    pub fn domain_size(&self, domains: &[u64]) -> u128 {
        self.members.iter().map(|&a| domains[a] as u128).product()
    }

    /// True when every element of the (sorted) subset is a member.
    pub fn contains_subset(&self, subset: &[usize]) -> bool {
        subset.iter().all(|&a| self.contains(a))
    }

    pub fn intersection_size(&self, other: &BTreeSet<usize>) -> usize {
        self.members.iter().filter(|a| other.contains(a)).count()
    }
}

/// A family of blocks labeled with its C(v, k, t) parameters. `k` is nominal:
/// the largest block length (blocks may be smaller where the domain budget
/// bites). `verified` records whether coverage has actually been checked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoveringDesign {
    pub v: usize,
    pub k: usize,
    pub t: usize,
    pub blocks: Vec<Block>,
    pub verified: bool,
}

impl CoveringDesign {
    /// Largest block domain volume under the given domain sizes.
    pub fn max_block_volume(&self, domains: &[u64]) -> u128 {
        self.blocks
            .iter()
            .map(|b| b.domain_size(domains))
            .max()
            .unwrap_or(0)
    }
}

/// Checks the covering property: returns the t-subsets (in lexicographic
/// order) that no block contains. An empty result means the design is valid.
pub fn verify_covering(design: &CoveringDesign) -> Result<Vec<Vec<usize>>, CoveringError> {
    let (v, t) = (design.v, design.t);
    check_enumeration_size(v, t)?;
    let mut uncovered = Vec::new();
    let mut subset: Vec<usize> = (0..t).collect();
    loop {
        if !design.blocks.iter().any(|b| b.contains_subset(&subset)) {
            uncovered.push(subset.clone());
        }
        if !advance_subset(&mut subset, v) {
            break;
        }
    }
    Ok(uncovered)
}

fn check_enumeration_size(v: usize, t: usize) -> Result<(), CoveringError> {
    if t == 0 || t > v {
        return Err(CoveringError::BadStrength { t, v });
    }
    let count = binomial(v, t);
    if count > SUBSET_ENUMERATION_GUARD {
        return Err(CoveringError::TooManySubsets {
            v,
            t,
            count,
            guard: SUBSET_ENUMERATION_GUARD,
        });
    }
    Ok(())
}

/// Saturating binomial coefficient in u128.
fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 0..k {
        result = result.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    result
}

/// Lexicographic successor of a sorted t-subset of 0..v. Returns false after
/// the last subset.
fn advance_subset(subset: &mut [usize], v: usize) -> bool {
    let t = subset.len();
    for i in (0..t).rev() {
        if subset[i] < v - (t - i) {
            subset[i] += 1;
            for j in i + 1..t {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Builds a covering design greedily under a domain budget.
///
/// Each round seeds a new block with the lexicographically first uncovered
/// t-subset, then grows it with the attribute covering the most still-
/// uncovered t-subsets, as long as the block's domain volume stays at or
/// below `m_k` and the attribute adds coverage. Ties go to the lowest
/// attribute index, so the construction is deterministic.
///
/// Errors with [`CoveringError::Infeasible`] if some t-subset alone exceeds
/// the budget — no design can cover it.
pub fn greedy_covering(
    domains: &[u64],
    m_k: u128,
    t: usize,
) -> Result<CoveringDesign, CoveringError> {
    if domains.is_empty() || domains.contains(&0) {
        return Err(CoveringError::BadDomains);
    }
    let v = domains.len();
    check_enumeration_size(v, t)?;

    // Collect all t-subsets; fail fast on one that cannot fit any block.
    let mut subsets: Vec<Vec<usize>> = Vec::new();
    let mut subset: Vec<usize> = (0..t).collect();
    loop {
        let volume: u128 = subset.iter().map(|&a| domains[a] as u128).product();
        if volume > m_k {
            return Err(CoveringError::Infeasible {
                subset: subset.clone(),
                volume,
                m_k,
            });
        }
        subsets.push(subset.clone());
        if !advance_subset(&mut subset, v) {
            break;
        }
    }

    let mut covered = vec![false; subsets.len()];
    let mut remaining = subsets.len();
    let mut blocks: Vec<Block> = Vec::new();

    while remaining > 0 {
        // Seed: first uncovered subset in lexicographic order.
        let seed_at = covered.iter().position(|&c| !c).unwrap();
        let mut members: Vec<usize> = subsets[seed_at].clone();
        let mut volume: u128 = members.iter().map(|&a| domains[a] as u128).product();

        // Grow while some attribute both fits the budget and covers new
        // t-subsets.
        loop {
            let mut best: Option<(usize, usize)> = None; // (gain, attr)
            for (attr, &dom) in domains.iter().enumerate() {
                if members.contains(&attr) {
                    continue;
                }
                if volume.saturating_mul(dom as u128) > m_k {
                    continue;
                }
                let gain = coverage_gain(&subsets, &covered, &members, attr);
                if gain > 0 && best.is_none_or(|(g, _)| gain > g) {
                    best = Some((gain, attr));
                }
            }
            match best {
                Some((_, attr)) => {
                    members.push(attr);
                    members.sort_unstable();
                    volume *= domains[attr] as u128;
                }
                None => break,
            }
        }

        let block = Block::new(members);
        for (i, s) in subsets.iter().enumerate() {
            if !covered[i] && block.contains_subset(s) {
                covered[i] = true;
                remaining -= 1;
            }
        }
        blocks.push(block);
    }

    let k = blocks.iter().map(Block::len).max().unwrap_or(0);
    Ok(CoveringDesign {
        v,
        k,
        t,
        blocks,
        verified: true,
    })
}

/// Number of still-uncovered t-subsets inside `members + {attr}`.
fn coverage_gain(
    subsets: &[Vec<usize>],
    covered: &[bool],
    members: &[usize],
    attr: usize,
) -> usize {
    subsets
        .iter()
        .zip(covered)
        .filter(|(s, &c)| {
            !c && s
                .iter()
                .all(|&a| a == attr || members.binary_search(&a).is_ok())
        })
        .count()
}

// ---------------------------------------------------------------------------
// Attribute joining
// ---------------------------------------------------------------------------

/// A partition of the original attributes into groups; each group becomes one
/// super-attribute whose domain is the product of its members' domains (codes
/// combined mixed-radix, first member most significant). Groups are ordered by
/// their smallest member, singletons included, so the super-attribute order is
/// stable and invertible.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct JoinPlan {
    pub groups: Vec<Vec<usize>>,
}

impl JoinPlan {
    /// The plan that keeps every attribute as its own group.
    pub fn identity(n: usize) -> Self {
        JoinPlan {
            groups: (0..n).map(|a| vec![a]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.groups.iter().all(|g| g.len() == 1)
    }

    /// Domain size of each group under the original domains.
    pub fn group_domains(&self, domains: &[u64]) -> Vec<u64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&a| domains[a]).product())
            .collect()
    }

    /// Index of the group containing an original attribute.
    pub fn group_of(&self, attr: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&attr))
    }
}

/// Plans attribute joins to balance domain sizes.
///
/// Narrow attributes waste tensor axes, so the planner repeatedly takes the
/// group with the smallest domain and, while that domain is below
/// `target_balance * median(original domains)`, merges it with the partner
/// group giving the smallest merged domain that reaches the target (or, if no
/// merge reaches it, the largest merged domain below it). A merge is never
/// allowed to exceed `target_balance * max(original domains)`, which bounds
/// every group's training cost; when no admissible partner exists the group
/// stays as it is. Ties prefer the lowest attribute index throughout.
pub fn plan_joins(domains: &[u64], target_balance: f64) -> Result<JoinPlan, CoveringError> {
    if domains.is_empty() || domains.contains(&0) {
        return Err(CoveringError::BadDomains);
    }
    let target = target_balance * median(domains);
    let cap = target_balance * (*domains.iter().max().unwrap() as f64);

    // Each live group: (sorted members, domain volume).
    let mut groups: Vec<(Vec<usize>, u128)> = (0..domains.len())
        .map(|a| (vec![a], domains[a] as u128))
        .collect();

    // Smallest-domain group first; ties go to the lowest min member (groups
    // keep their creation order, which preserves that).
    while let Some((small_at, _)) = groups
        .iter()
        .enumerate()
        .min_by_key(|(_, (g, vol))| (*vol, g[0]))
    {
        if (groups[small_at].1 as f64) >= target {
            break;
        }

        let small_vol = groups[small_at].1;
        let mut best: Option<(usize, u128)> = None; // (partner index, merged volume)
        for (i, (g, vol)) in groups.iter().enumerate() {
            if i == small_at {
                continue;
            }
            let merged = small_vol.saturating_mul(*vol);
            if (merged as f64) > cap {
                continue;
            }
            let candidate = (i, merged);
            best = Some(match best {
                None => candidate,
                Some(current) => pick_merge(current, candidate, target, &groups),
            });
            let _ = g;
        }

        match best {
            Some((partner, merged)) => {
                let (mut a, _) = groups.remove(small_at.max(partner));
                let (mut b, _) = groups.remove(small_at.min(partner));
                a.append(&mut b);
                a.sort_unstable();
                groups.push((a, merged));
            }
            None => break, // nothing admissible; leave the small group alone
        }
    }

    let mut plan: Vec<Vec<usize>> = groups.into_iter().map(|(g, _)| g).collect();
    plan.sort_by_key(|g| g[0]);
    Ok(JoinPlan { groups: plan })
}

/// Chooses between two merge candidates: prefer reaching the target with the
/// smallest merged volume; below target, prefer the largest volume (closest
/// from below). Ties go to the group with the lowest first member.
fn pick_merge(
    a: (usize, u128),
    b: (usize, u128),
    target: f64,
    groups: &[(Vec<usize>, u128)],
) -> (usize, u128) {
    let reach_a = (a.1 as f64) >= target;
    let reach_b = (b.1 as f64) >= target;
    let better_b = match (reach_a, reach_b) {
        (true, false) => false,
        (false, true) => true,
        (true, true) => b.1 < a.1 || (b.1 == a.1 && groups[b.0].0[0] < groups[a.0].0[0]),
        (false, false) => b.1 > a.1 || (b.1 == a.1 && groups[b.0].0[0] < groups[a.0].0[0]),
    };
    if better_b {
        b
    } else {
        a
    }
}

fn median(domains: &[u64]) -> f64 {
    let mut sorted: Vec<u64> = domains.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

// ---------------------------------------------------------------------------
// Design files
// ---------------------------------------------------------------------------

/// Parses the textual design format and optionally verifies coverage.
///
/// Format: UTF-8, `#` starts a comment; the first data line is `v k t`;
/// every following data line is one block as space-separated **1-based**
/// attribute indices.
///
/// With `verify = true` the parsed design must cover all t-subsets (the error
/// lists the misses); with `verify = false` it is returned as parsed, with
/// `verified` left unset.
pub fn load_design(text: &str, verify: bool) -> Result<CoveringDesign, CoveringError> {
    let mut header: Option<(usize, usize, usize)> = None;
    let mut blocks: Vec<Block> = Vec::new();

    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let numbers: Result<Vec<usize>, _> = fields.iter().map(|f| f.parse::<usize>()).collect();
        let numbers = numbers.map_err(|e| CoveringError::Parse {
            line: line_no + 1,
            reason: format!("expected integers, got {fields:?} ({e})"),
        })?;

        match header {
            None => {
                if numbers.len() != 3 {
                    return Err(CoveringError::Parse {
                        line: line_no + 1,
                        reason: format!("header must be `v k t`, got {} fields", numbers.len()),
                    });
                }
                let (v, k, t) = (numbers[0], numbers[1], numbers[2]);
                if v == 0 || t == 0 || t > v {
                    return Err(CoveringError::Parse {
                        line: line_no + 1,
                        reason: format!("bad parameters v={v} k={k} t={t}"),
                    });
                }
                header = Some((v, k, t));
            }
            Some((v, _, _)) => {
                for &n in &numbers {
                    if n == 0 || n > v {
                        return Err(CoveringError::Parse {
                            line: line_no + 1,
                            reason: format!("attribute index {n} outside 1..={v}"),
                        });
                    }
                }
                if numbers.is_empty() {
                    continue;
                }
                blocks.push(Block::new(numbers.iter().map(|&n| n - 1).collect()));
            }
        }
    }

    let (v, k, t) = header.ok_or(CoveringError::Parse {
        line: 0,
        reason: "missing `v k t` header".into(),
    })?;

    let mut design = CoveringDesign {
        v,
        k,
        t,
        blocks,
        verified: false,
    };
    if verify {
        let uncovered = verify_covering(&design)?;
        if !uncovered.is_empty() {
            return Err(CoveringError::Uncovered {
                count: uncovered.len(),
                first: uncovered[0].clone(),
            });
        }
        design.verified = true;
    }
    Ok(design)
}

/// Renders a design back to the textual format (1-based indices).
pub fn format_design(design: &CoveringDesign) -> String {
    let mut out = format!("{} {} {}\n", design.v, design.k, design.t);
    for block in &design.blocks {
        let line: Vec<String> = block.members.iter().map(|&a| (a + 1).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The five-block C(7,4,2) used across the doc examples (1-based in the
    /// comments, 0-based in code): {1,2,3,4} {1,4,5,6} {1,5,6,7} {2,3,4,7}
    /// {2,3,5,6}.
    fn example_design() -> CoveringDesign {
        CoveringDesign {
            v: 7,
            k: 4,
            t: 2,
            blocks: vec![
                Block::new(vec![0, 1, 2, 3]),
                Block::new(vec![0, 3, 4, 5]),
                Block::new(vec![0, 4, 5, 6]),
                Block::new(vec![1, 2, 3, 6]),
                Block::new(vec![1, 2, 4, 5]),
            ],
            verified: false,
        }
    }

    #[test]
    fn example_design_covers_all_pairs() {
        let uncovered = verify_covering(&example_design()).unwrap();
        assert!(uncovered.is_empty());
    }

    #[test]
    fn removing_a_block_exposes_uncovered_pairs() {
        let mut design = example_design();
        design.blocks.remove(2); // drop {1,5,6,7}
        let uncovered = verify_covering(&design).unwrap();
        // {5,7} (0-based {4,6}) is among the now-uncovered pairs, and the
        // report is in lexicographic order.
        assert!(uncovered.contains(&vec![4, 6]));
        let mut sorted = uncovered.clone();
        sorted.sort();
        assert_eq!(uncovered, sorted);
    }

    #[test]
    fn verify_rejects_bad_strength_and_huge_enumerations() {
        let mut design = example_design();
        design.t = 0;
        assert!(matches!(
            verify_covering(&design),
            Err(CoveringError::BadStrength { .. })
        ));
        let wide = CoveringDesign {
            v: 100,
            k: 4,
            t: 50,
            blocks: vec![],
            verified: false,
        };
        assert!(matches!(
            verify_covering(&wide),
            Err(CoveringError::TooManySubsets { .. })
        ));
    }

    #[test]
    fn greedy_single_block_when_budget_allows_everything() {
        // Three binary-ish attributes, budget 8 = full joint: one block.
        let design = greedy_covering(&[2, 2, 2], 8, 2).unwrap();
        assert_eq!(design.blocks.len(), 1);
        assert_eq!(design.blocks[0].members, vec![0, 1, 2]);
        assert!(design.verified);
    }

    #[test]
    fn greedy_seven_binary_attributes_meets_the_covering_minimum() {
        // C(7,4,2) needs at least 5 blocks; budget 16 caps blocks at 4
        // binary attributes.
        let design = greedy_covering(&[2; 7], 16, 2).unwrap();
        assert!(
            design.blocks.len() >= 5,
            "got {} blocks",
            design.blocks.len()
        );
        assert_eq!(design.k, 4);
        assert!(verify_covering(&design).unwrap().is_empty());
        for b in &design.blocks {
            assert!(b.domain_size(&[2; 7]) <= 16);
        }
    }

    #[test]
    fn greedy_is_deterministic() {
        let a = greedy_covering(&[4, 3, 5, 2, 6], 200, 2).unwrap();
        let b = greedy_covering(&[4, 3, 5, 2, 6], 200, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_rejects_infeasible_budgets() {
        // The pair {0,1} alone has volume 12 > 10.
        let err = greedy_covering(&[3, 4, 2], 10, 2).unwrap_err();
        match err {
            CoveringError::Infeasible {
                subset,
                volume,
                m_k,
            } => {
                assert_eq!(subset, vec![0, 1]);
                assert_eq!(volume, 12);
                assert_eq!(m_k, 10);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn join_plan_balances_tables_iii_iv() {
        // Domains [10,11,3,4,7,2,2]: the planner joins attribute 3 with 6 and
        // 4 with 7 (1-based), giving [10,11,6,8,7].
        let plan = plan_joins(&[10, 11, 3, 4, 7, 2, 2], 1.25).unwrap();
        assert_eq!(
            plan.groups,
            vec![vec![0], vec![1], vec![2, 5], vec![3, 6], vec![4]]
        );
        assert_eq!(
            plan.group_domains(&[10, 11, 3, 4, 7, 2, 2]),
            vec![10, 11, 6, 8, 7]
        );
    }

    #[test]
    fn join_plan_is_identity_when_merging_overshoots() {
        // [100, 2]: merging gives 200, above 1.25 * max = 125; stay apart.
        let plan = plan_joins(&[100, 2], 1.25).unwrap();
        assert!(plan.is_identity());
        // Equal domains have nothing to fix either.
        let plan = plan_joins(&[5, 5, 5], 1.25).unwrap();
        assert!(plan.is_identity());
    }

    #[test]
    fn design_file_round_trips() {
        let text = "\
# example covering design
7 4 2
1 2 3 4
1 4 5 6   # with a trailing comment
1 5 6 7
2 3 4 7
2 3 5 6
";
        let design = load_design(text, true).unwrap();
        assert_eq!(design.v, 7);
        assert_eq!(design.t, 2);
        assert_eq!(design.blocks.len(), 5);
        assert!(design.verified);
        assert_eq!(design.blocks[1].members, vec![0, 3, 4, 5]);

        let rendered = format_design(&design);
        let again = load_design(&rendered, true).unwrap();
        assert_eq!(again.blocks, design.blocks);
    }

    #[test]
    fn design_file_verification_reports_uncovered_pairs() {
        // Drop {1,5,6,7} from the example: verification must fail and the
        // uncovered pair {5,7} must be reported.
        let text = "7 4 2\n1 2 3 4\n1 4 5 6\n2 3 4 7\n2 3 5 6\n";
        let err = load_design(text, true).unwrap_err();
        match err {
            CoveringError::Uncovered { count, first } => {
                assert!(count >= 1);
                assert_eq!(first, vec![0, 6]); // lexicographically first miss: {1,7}
            }
            other => panic!("unexpected error {other:?}"),
        }
        // Unverified loading returns the design as-is.
        let design = load_design(text, false).unwrap();
        assert!(!design.verified);
        assert_eq!(design.blocks.len(), 4);
    }

    #[test]
    fn design_file_rejects_malformed_input() {
        assert!(matches!(
            load_design("", true),
            Err(CoveringError::Parse { line: 0, .. })
        ));
        assert!(matches!(
            load_design("7 4\n1 2\n", true),
            Err(CoveringError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            load_design("3 2 2\n1 x\n", true),
            Err(CoveringError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            load_design("3 2 2\n1 4\n", true),
            Err(CoveringError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        /// Greedy output always covers every t-subset and respects the budget.
        #[test]
        fn prop_greedy_is_sound(
            domains in proptest::collection::vec(2u64..6, 3..8),
            t in 2usize..4,
        ) {
            prop_assume!(t < domains.len());
            // Budget: generous enough for any t-subset (max domain^t).
            let m_k = domains.iter().map(|&d| d as u128).fold(1u128, |a, b| a.max(b)).pow(t as u32);
            if let Ok(design) = greedy_covering(&domains, m_k, t) {
                prop_assert!(verify_covering(&design).unwrap().is_empty());
                for b in &design.blocks {
                    prop_assert!(b.domain_size(&domains) <= m_k);
                    prop_assert!(b.len() >= t);
                }
            }
        }

        /// Adding a block never uncovers anything (coverage is monotone).
        #[test]
        fn prop_coverage_monotone(extra in proptest::collection::btree_set(0usize..7, 2..5)) {
            let mut design = example_design();
            design.blocks.remove(4);
            let before = verify_covering(&design).unwrap();
            design.blocks.push(Block::new(extra.into_iter().collect()));
            let after = verify_covering(&design).unwrap();
            for s in &after {
                prop_assert!(before.contains(s));
            }
        }

        /// Join planning always yields a partition and respects the cap.
        #[test]
        fn prop_join_plan_is_partition(
            domains in proptest::collection::vec(2u64..20, 1..9),
            balance in 1.0f64..2.0,
        ) {
            let plan = plan_joins(&domains, balance).unwrap();
            let mut seen: Vec<usize> = plan.groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..domains.len()).collect::<Vec<_>>());
            let cap = balance * (*domains.iter().max().unwrap() as f64);
            for (g, d) in plan.groups.iter().zip(plan.group_domains(&domains)) {
                // Merged groups stay under the cap; singletons are exempt
                // (they were never merged).
                if g.len() > 1 {
                    prop_assert!((d as f64) <= cap);
                }
            }
        }
    }
}
