//! Consumer group membership, partition assignment and committed offsets.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use tracing::debug;

/// Deals partitions `0..partitions` round-robin over the members sorted
/// lexicographically. Returns the owning member index per partition.
pub fn assign_round_robin<S: AsRef<str>>(members: &[S], partitions: u32) -> Vec<Option<usize>> {
    if members.is_empty() {
        return vec![None; partitions as usize];
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| members[a].as_ref().cmp(members[b].as_ref()));
    (0..partitions as usize).map(|p| Some(order[p % order.len()])).collect()
}

#[derive(Debug)]
struct Member {
    token: u64,
    last_seen: Instant,
}

#[derive(Debug)]
pub(crate) struct Group {
    members: BTreeMap<String, Member>,
    /// Owning consumer id per partition.
    assignment: Vec<Option<String>>,
    committed: Vec<u64>,
    /// Member token that received uncommitted records from a partition and
    /// has not polled since. A new owner waits until the holder lets go.
    held_by: Vec<Option<u64>>,
    generation: u64,
}

impl Group {
    pub(crate) fn new(partitions: u32, committed: Vec<u64>) -> Self {
        let n = partitions as usize;
        let mut committed = committed;
        committed.resize(n, 0);
        Self { members: BTreeMap::new(), assignment: vec![None; n], committed, held_by: vec![None; n], generation: 0 }
    }

    pub(crate) fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn committed(&self, partition: u32) -> u64 {
        self.committed[partition as usize]
    }

    pub(crate) fn set_committed(&mut self, partition: u32, offset: u64) {
        self.committed[partition as usize] = offset;
    }

    /// Adds a member, replacing any previous incarnation with the same id.
    pub(crate) fn join(&mut self, consumer_id: &str, token: u64) {
        if let Some(old) = self.members.insert(consumer_id.to_owned(), Member { token, last_seen: Instant::now() }) {
            self.release(old.token);
        }
        self.rebalance();
    }

    /// Removes the member holding `token`. Returns false if it was not present.
    pub(crate) fn leave(&mut self, token: u64) -> bool {
        let Some(id) = self.member_id(token).map(str::to_owned) else {
            return false;
        };
        self.members.remove(&id);
        self.release(token);
        self.rebalance();
        true
    }

    pub(crate) fn member_id(&self, token: u64) -> Option<&str> {
        self.members.iter().find(|(_, m)| m.token == token).map(|(id, _)| id.as_str())
    }

    /// Refreshes liveness of `token`; false if the member is unknown.
    pub(crate) fn touch(&mut self, token: u64) -> bool {
        match self.members.values_mut().find(|m| m.token == token) {
            Some(m) => {
                m.last_seen = Instant::now();
                true
            }
            None => false,
        }
    }

    /// Drops members silent for longer than `timeout`.
    pub(crate) fn expire(&mut self, timeout: Duration) {
        let now = Instant::now();
        let stale: Vec<(String, u64)> = self
            .members
            .iter()
            .filter(|(_, m)| now.duration_since(m.last_seen) > timeout)
            .map(|(id, m)| (id.clone(), m.token))
            .collect();
        if stale.is_empty() {
            return;
        }
        for (id, token) in stale {
            debug!(consumer = %id, "expiring silent group member");
            self.members.remove(&id);
            self.release(token);
        }
        self.rebalance();
    }

    /// Clears every hold of `token`, returning the affected partitions.
    pub(crate) fn release(&mut self, token: u64) -> Vec<u32> {
        let mut released = Vec::new();
        for (p, holder) in self.held_by.iter_mut().enumerate() {
            if *holder == Some(token) {
                *holder = None;
                released.push(p as u32);
            }
        }
        released
    }

    pub(crate) fn hold(&mut self, partition: u32, token: u64) {
        self.held_by[partition as usize] = Some(token);
    }

    fn rebalance(&mut self) {
        let ids: Vec<&String> = self.members.keys().collect();
        let owners = assign_round_robin(&ids, self.assignment.len() as u32);
        self.assignment = owners.into_iter().map(|o| o.map(|i| ids[i].clone())).collect();
        self.generation += 1;
    }

    /// Partitions currently assigned to `consumer_id`.
    pub(crate) fn assigned(&self, consumer_id: &str) -> Vec<u32> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, owner)| owner.as_deref() == Some(consumer_id))
            .map(|(p, _)| p as u32)
            .collect()
    }

    pub(crate) fn is_assigned(&self, partition: u32, consumer_id: &str) -> bool {
        self.assignment.get(partition as usize).and_then(|o| o.as_deref()) == Some(consumer_id)
    }

    /// Assigned partitions `token` may fetch from right now.
    pub(crate) fn fetchable(&self, consumer_id: &str, token: u64) -> Vec<u32> {
        self.assigned(consumer_id)
            .into_iter()
            .filter(|&p| matches!(self.held_by[p as usize], None) || self.held_by[p as usize] == Some(token))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(assign: &[Option<usize>], members: usize) -> Vec<usize> {
        let mut out = vec![0; members];
        for owner in assign.iter().flatten() {
            out[*owner] += 1;
        }
        out
    }

    #[test]
    fn one_member_gets_everything() {
        let a = assign_round_robin(&["svc-1"], 16);
        assert_eq!(sizes(&a, 1), vec![16]);
    }

    #[test]
    fn three_members_sixteen_partitions() {
        let a = assign_round_robin(&["svc-2", "svc-3", "svc-1"], 16);
        // Sorted order svc-1, svc-2, svc-3 -> svc-1 deals first.
        assert_eq!(sizes(&a, 3), vec![5, 5, 6]);
        assert_eq!(a[0], Some(2));
        assert_eq!(a[1], Some(0));
    }

    #[test]
    fn assignment_sizes_by_enumeration() {
        for members in 1..=8usize {
            for partitions in 1..=20u32 {
                let ids: Vec<String> = (0..members).map(|i| format!("m{i:02}")).collect();
                let a = assign_round_robin(&ids, partitions);
                let mut s = sizes(&a, members);
                s.sort_unstable();
                let base = partitions as usize / members;
                let extra = partitions as usize % members;
                let mut expected = vec![base; members - extra];
                expected.extend(std::iter::repeat_n(base + 1, extra));
                assert_eq!(s, expected, "{members} members, {partitions} partitions");
                assert!(a.iter().all(Option::is_some));
            }
        }
    }

    #[test]
    fn rejoin_replaces_old_member() {
        let mut g = Group::new(4, Vec::new());
        g.join("a", 1);
        g.hold(0, 1);
        g.join("a", 2);
        assert_eq!(g.member_id(1), None);
        assert_eq!(g.member_id(2), Some("a"));
        assert_eq!(g.fetchable("a", 2), vec![0, 1, 2, 3]);
    }

    #[test]
    fn held_partition_waits_for_release() {
        let mut g = Group::new(2, Vec::new());
        g.join("a", 1);
        g.hold(0, 1);
        g.hold(1, 1);
        g.join("b", 2);
        // Partition 1 moved to b but a still processes records from it.
        assert_eq!(g.assigned("b"), vec![1]);
        assert!(g.fetchable("b", 2).is_empty());
        g.release(1);
        assert_eq!(g.fetchable("b", 2), vec![1]);
    }

    #[test]
    fn expiry_rebalances() {
        let mut g = Group::new(3, Vec::new());
        g.join("a", 1);
        g.join("b", 2);
        std::thread::sleep(Duration::from_millis(20));
        g.touch(2);
        g.expire(Duration::from_millis(10));
        assert_eq!(g.assigned("b"), vec![0, 1, 2]);
        assert!(g.assigned("a").is_empty());
    }
}
