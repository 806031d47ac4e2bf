//! Cascade domain types and the text format.
//!
//! A cascade is the diffusion trace of one post: who joined, from whom, and
//! when. Structurally it is a tree rooted at the original poster (every
//! non-root node has exactly one parent), with non-decreasing join times
//! along every root-to-leaf path.
//!
//! File format: UTF-8, one cascade per line,
//!
//! ```text
//! <id>\t<root>\t<publish_time>\t<num_records>\t<rec> <rec> ...
//! ```
//!
//! where each `<rec>` is a root-to-node path `u0/u1/.../uk:t` and `t` is the
//! joining node's time offset from `publish_time`. The root's own record is
//! `<root>:0`. Only the terminal hop of each path is authoritative: record
//! `A/B/C:300` contributes the edge (B, C) at time 300.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::BufRead;

/// One join event. The root record has `parent == None` and `join_time == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepostRecord {
    pub parent: Option<String>,
    pub child: String,
    pub join_time: f64,
}

/// A full cascade: tree of join events with times as offsets from
/// `publish_time`. Records are sorted by (join_time, child id).
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub id: String,
    pub root: String,
    pub publish_time: f64,
    pub records: Vec<RepostRecord>,
}

impl Cascade {
    /// Number of nodes (records).
    pub fn size(&self) -> usize {
        self.records.len()
    }

    /// Map node id -> parent id for non-root nodes.
    pub fn parent_map(&self) -> HashMap<&str, &str> {
        self.records
            .iter()
            .filter_map(|r| r.parent.as_deref().map(|p| (r.child.as_str(), p)))
            .collect()
    }

    /// Map node id -> join time.
    pub fn time_map(&self) -> HashMap<&str, f64> {
        self.records.iter().map(|r| (r.child.as_str(), r.join_time)).collect()
    }

    /// Check every structural invariant: single root record at time 0, one
    /// parent per node, parent joins no later than its child, finite
    /// non-negative sorted times, and everything reachable from the root.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Validation(format!("cascade `{}`: {msg}", self.id)));
        if self.records.is_empty() {
            return err("no records".into());
        }
        if !self.publish_time.is_finite() || self.publish_time < 0.0 {
            return err(format!("bad publish_time {}", self.publish_time));
        }
        let mut seen: HashMap<&str, f64> = HashMap::new();
        let mut roots = 0;
        for r in &self.records {
            if !r.join_time.is_finite() || r.join_time < 0.0 {
                return err(format!("bad join_time {} for `{}`", r.join_time, r.child));
            }
            if seen.insert(r.child.as_str(), r.join_time).is_some() {
                return err(format!("node `{}` has multiple records", r.child));
            }
            match &r.parent {
                None => {
                    roots += 1;
                    if r.child != self.root {
                        return err(format!("root record names `{}`", r.child));
                    }
                    if r.join_time != 0.0 {
                        return err("root join_time must be 0".into());
                    }
                }
                Some(p) => {
                    if *p == r.child {
                        return err(format!("self-loop at `{}`", r.child));
                    }
                }
            }
        }
        if roots != 1 {
            return err(format!("{roots} root records"));
        }
        for r in &self.records {
            if let Some(p) = &r.parent {
                match seen.get(p.as_str()) {
                    None => return err(format!("unknown parent `{p}` of `{}`", r.child)),
                    Some(&pt) if pt > r.join_time => {
                        return err(format!(
                            "parent `{p}` joins at {pt}, after child `{}` at {}",
                            r.child, r.join_time
                        ))
                    }
                    _ => {}
                }
            }
        }
        for w in self.records.windows(2) {
            let cmp = w[0]
                .join_time
                .total_cmp(&w[1].join_time)
                .then_with(|| w[0].child.cmp(&w[1].child));
            if cmp == std::cmp::Ordering::Greater {
                return err("records not sorted by (join_time, child)".into());
            }
        }
        // Reachability from the root; a non-root component implies a cycle.
        let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
        for r in &self.records {
            if let Some(p) = &r.parent {
                children.entry(p.as_str()).or_default().push(r.child.as_str());
            }
        }
        let mut stack = vec![self.root.as_str()];
        let mut reached = 0usize;
        let mut visited: HashMap<&str, ()> = HashMap::new();
        while let Some(n) = stack.pop() {
            if visited.insert(n, ()).is_some() {
                continue;
            }
            reached += 1;
            if let Some(cs) = children.get(n) {
                stack.extend(cs);
            }
        }
        if reached != self.records.len() {
            return err("cycle or subtree detached from root".into());
        }
        Ok(())
    }

    /// Canonical line form (root-to-node paths, records sorted by
    /// (join_time, child id)). Inverse of [`parse_cascade_line`].
    pub fn to_line(&self) -> String {
        let parents = self.parent_map();
        let mut recs = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let mut path = vec![r.child.as_str()];
            let mut cur = r.child.as_str();
            while let Some(&p) = parents.get(cur) {
                path.push(p);
                cur = p;
            }
            path.reverse();
            recs.push(format!("{}:{}", path.join("/"), r.join_time));
        }
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id,
            self.root,
            self.publish_time,
            self.records.len(),
            recs.join(" ")
        )
    }
}

fn sort_records(records: &mut [RepostRecord]) {
    records.sort_by(|a, b| a.join_time.total_cmp(&b.join_time).then_with(|| a.child.cmp(&b.child)));
}

/// Parse one cascade line. `line_no` is 1-based and used in errors only.
pub fn parse_cascade_line(line: &str, line_no: usize) -> Result<Cascade> {
    let perr = |msg: String| Error::Parse { line: line_no, msg };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(perr(format!("expected 5 tab-separated fields, got {}", fields.len())));
    }
    let id = fields[0].trim();
    let root = fields[1].trim();
    if id.is_empty() || root.is_empty() {
        return Err(perr("empty id or root".into()));
    }
    let publish_time: f64 =
        fields[2].parse().map_err(|_| perr(format!("bad publish_time `{}`", fields[2])))?;
    if !publish_time.is_finite() || publish_time < 0.0 {
        return Err(perr(format!("publish_time {publish_time} must be finite and >= 0")));
    }
    let num_records: usize =
        fields[3].parse().map_err(|_| perr(format!("bad record count `{}`", fields[3])))?;
    let raw_recs: Vec<&str> = fields[4].split(' ').filter(|s| !s.is_empty()).collect();
    if raw_recs.len() != num_records {
        return Err(perr(format!(
            "record count field says {num_records}, found {}",
            raw_recs.len()
        )));
    }

    // (path nodes, join time) per record, in input order.
    let mut parsed: Vec<(Vec<&str>, f64)> = Vec::with_capacity(raw_recs.len());
    for rec in &raw_recs {
        let (path_str, time_str) =
            rec.rsplit_once(':').ok_or_else(|| perr(format!("record `{rec}` missing `:time`")))?;
        let t: f64 =
            time_str.parse().map_err(|_| perr(format!("bad time in record `{rec}`")))?;
        if !t.is_finite() || t < 0.0 {
            return Err(perr(format!("time {t} in record `{rec}` must be finite and >= 0")));
        }
        let path: Vec<&str> = path_str.split('/').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(perr(format!("empty node id in record `{rec}`")));
        }
        parsed.push((path, t));
    }

    // First occurrence wins for a node's parent; duplicate (parent, child)
    // pairs keep the earliest time.
    let mut order: Vec<String> = Vec::new();
    let mut nodes: HashMap<String, (Option<String>, f64)> = HashMap::new();
    let mut saw_root = false;
    for (path, t) in &parsed {
        let child = *path.last().expect("non-empty path");
        if path.len() == 1 {
            if child != root {
                return Err(perr(format!(
                    "single-node record `{child}` does not match root `{root}`"
                )));
            }
            if *t != 0.0 {
                return Err(perr(format!("root record time must be 0, got {t}")));
            }
            if !saw_root {
                saw_root = true;
                order.push(child.to_string());
                nodes.insert(child.to_string(), (None, 0.0));
            }
            continue;
        }
        let parent = path[path.len() - 2];
        if parent == child {
            return Err(perr(format!("self-loop in record `{}:{}`", path.join("/"), t)));
        }
        match nodes.get_mut(child) {
            None => {
                order.push(child.to_string());
                nodes.insert(child.to_string(), (Some(parent.to_string()), *t));
            }
            Some((existing_parent, existing_t)) => {
                if existing_parent.as_deref() == Some(parent) {
                    if *t < *existing_t {
                        *existing_t = *t;
                    }
                }
                // A different parent for an already-seen child: first
                // occurrence wins, the record is dropped.
            }
        }
    }
    if !saw_root {
        return Err(perr(format!("missing root record `{root}:0`")));
    }

    let mut records: Vec<RepostRecord> = order
        .into_iter()
        .map(|child| {
            let (parent, join_time) = nodes[&child].clone();
            RepostRecord { child, parent, join_time }
        })
        .collect();

    // Parent existence and time monotonicity, with the offending path named.
    let times: HashMap<&str, f64> =
        records.iter().map(|r| (r.child.as_str(), r.join_time)).collect();
    for r in &records {
        if let Some(p) = &r.parent {
            match times.get(p.as_str()) {
                None => {
                    return Err(perr(format!(
                        "parent `{p}` of `{}` never joins the cascade",
                        r.child
                    )))
                }
                Some(&pt) if pt > r.join_time => {
                    return Err(perr(format!(
                        "non-monotone path {p}/{}: parent joins at {pt}, child at {}",
                        r.child, r.join_time
                    )))
                }
                _ => {}
            }
        }
    }

    sort_records(&mut records);
    let cascade =
        Cascade { id: id.to_string(), root: root.to_string(), publish_time, records };
    cascade.validate().map_err(|e| perr(e.to_string()))?;
    Ok(cascade)
}

/// Parse a whole cascade file; blank lines are skipped.
pub fn parse_cascade_file<R: BufRead>(reader: R) -> Result<Vec<Cascade>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_cascade_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Parse cascades from an in-memory string.
pub fn parse_cascades_str(text: &str) -> Result<Vec<Cascade>> {
    parse_cascade_file(std::io::Cursor::new(text))
}

/// Serialize cascades in the canonical line format.
pub fn format_cascade_file(cascades: &[Cascade]) -> String {
    let mut s = String::new();
    for c in cascades {
        s.push_str(&c.to_line());
        s.push('\n');
    }
    s
}

/// Keep cascades whose publish time lies in `[lo, hi]` (e.g. a
/// posting-hours window).
pub fn filter_by_publish_time(cascades: Vec<Cascade>, lo: f64, hi: f64) -> Vec<Cascade> {
    cascades.into_iter().filter(|c| c.publish_time >= lo && c.publish_time <= hi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_line() {
        let c = parse_cascade_line("42\tA\t0\t3\tA:0 A/B:120 A/B/C:300", 1).unwrap();
        assert_eq!(c.id, "42");
        assert_eq!(c.root, "A");
        assert_eq!(c.records.len(), 3);
        assert_eq!(c.records[0], RepostRecord { parent: None, child: "A".into(), join_time: 0.0 });
        assert_eq!(
            c.records[1],
            RepostRecord { parent: Some("A".into()), child: "B".into(), join_time: 120.0 }
        );
        assert_eq!(
            c.records[2],
            RepostRecord { parent: Some("B".into()), child: "C".into(), join_time: 300.0 }
        );
    }

    #[test]
    fn parses_singleton() {
        let c = parse_cascade_line("7\tA\t0\t1\tA:0", 1).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.records[0].parent, None);
    }

    #[test]
    fn duplicate_edge_keeps_earliest() {
        let c = parse_cascade_line("9\tA\t0\t3\tA:0 A/B:50 A/B:80", 1).unwrap();
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.records[1].join_time, 50.0);
        // Order of duplicates does not matter.
        let c2 = parse_cascade_line("9\tA\t0\t3\tA:0 A/B:80 A/B:50", 1).unwrap();
        assert_eq!(c2.records[1].join_time, 50.0);
    }

    #[test]
    fn first_parent_wins() {
        let c = parse_cascade_line("1\tA\t0\t4\tA:0 A/B:10 A/B/C:20 A/C:30", 1).unwrap();
        let parents = c.parent_map();
        assert_eq!(parents["C"], "B");
        assert_eq!(c.time_map()["C"], 20.0);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let e = parse_cascade_line("1\tA\t0\t2\tA:0", 7).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_cascade_line("1\tA\t0\t1\tA:zero", 1).is_err());
        assert!(parse_cascade_line("only two\tfields", 1).is_err());
        assert!(parse_cascade_line("1\tA\t-1\t1\tA:0", 1).is_err());
    }

    #[test]
    fn non_monotone_path_names_the_path() {
        let e = parse_cascade_line("1\tA\t0\t3\tA:0 A/B:100 A/B/C:40", 1).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("non-monotone"), "{msg}");
        assert!(msg.contains("B/C"), "{msg}");
    }

    #[test]
    fn self_loop_rejected() {
        assert!(parse_cascade_line("1\tA\t0\t2\tA:0 A/A:5", 1).is_err());
    }

    #[test]
    fn detached_cycle_rejected() {
        // B's parent is C and C's parent is B; neither attaches to A.
        let e = parse_cascade_line("1\tA\t0\t3\tA:0 A/C/B:10 A/B/C:10", 1).unwrap_err();
        assert!(e.to_string().contains("cycle"), "{e}");
    }

    #[test]
    fn missing_root_record_rejected() {
        assert!(parse_cascade_line("1\tA\t0\t1\tA/B:10", 1).is_err());
    }

    #[test]
    fn unknown_parent_rejected() {
        let e = parse_cascade_line("1\tA\t0\t2\tA:0 A/X/B:10", 1).unwrap_err();
        assert!(e.to_string().contains("never joins"), "{e}");
    }

    #[test]
    fn line_round_trip_is_canonical() {
        let line = "42\tA\t0\t3\tA:0 A/B:120 A/B/C:300";
        let c = parse_cascade_line(line, 1).unwrap();
        assert_eq!(c.to_line(), line);
        let c2 = parse_cascade_line(&c.to_line(), 1).unwrap();
        assert_eq!(c, c2);
    }

    #[test]
    fn multi_line_file() {
        let text = "1\tA\t0\t1\tA:0\n\n2\tB\t3.5\t2\tB:0 B/X:1.25\n";
        let cs = parse_cascades_str(text).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[1].publish_time, 3.5);
    }

    #[test]
    fn publish_time_filter() {
        let cs = parse_cascades_str("1\tA\t2\t1\tA:0\n2\tB\t9\t1\tB:0\n").unwrap();
        let kept = filter_by_publish_time(cs, 0.0, 5.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "1");
    }
}
