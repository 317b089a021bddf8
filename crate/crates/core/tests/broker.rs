mod common;

use bytes::Bytes;
use pilotstream::broker::{fnv1a, Broker, Target, TopicConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn in_memory_broker_matches_shadow(seed in any::<u64>()) {
        let compared = common::broker_sequence(seed, 150, None);
        prop_assert!(compared.is_ok(), "{}", compared.unwrap_err());
    }

    #[test]
    fn fnv_matches_reference(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        prop_assert_eq!(fnv1a(&bytes), common::fnv1a_ref(&bytes));
    }

    #[test]
    fn offsets_are_dense_per_partition(targets in proptest::collection::vec(0u32..4, 0..100)) {
        let b = Broker::in_memory();
        b.create_topic(TopicConfig::new("t", 4)).unwrap();
        let mut next = [0u64; 4];
        for p in targets {
            let a = b.append("t", Target::Partition(p), vec![p as u8], 0).unwrap();
            prop_assert_eq!(a.offset, next[p as usize]);
            next[p as usize] += 1;
        }
        prop_assert_eq!(b.latest_offsets("t").unwrap(), next.to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn disk_broker_matches_shadow_across_reopen(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let compared = common::broker_sequence(seed, 120, Some(dir.path()));
        prop_assert!(compared.is_ok(), "{}", compared.unwrap_err());
    }
}

#[test]
fn keyed_records_land_on_hashed_partition() {
    let b = Broker::in_memory();
    b.create_topic(TopicConfig::new("t", 7)).unwrap();
    for key in ["a", "sensor-1", "", "detector/3"] {
        let a = b.append("t", Target::Key(Bytes::from(key)), vec![0], 0).unwrap();
        assert_eq!(a.partition as u64, common::fnv1a_ref(key.as_bytes()) % 7);
    }
}

#[test]
fn reopen_keeps_trimmed_head() {
    let dir = tempfile::tempdir().unwrap();
    {
        let b = Broker::open(dir.path()).unwrap();
        b.create_topic(TopicConfig::new("t", 1).with_retention_bytes(10)).unwrap();
        for i in 0..6u8 {
            b.append("t", Target::Partition(0), vec![i; 4], u64::from(i)).unwrap();
        }
        assert_eq!(b.enforce_retention_at("t", 0).unwrap(), vec![4]);
    }
    let b = Broker::open(dir.path()).unwrap();
    assert_eq!(b.earliest_offsets("t").unwrap(), vec![4]);
    assert_eq!(b.latest_offsets("t").unwrap(), vec![6]);
    let r = b.fetch("t", 0, 4, 1 << 20).unwrap();
    assert_eq!(r.records.iter().map(|r| r.payload[0]).collect::<Vec<_>>(), vec![4, 5]);
    assert!(b.fetch("t", 0, 3, 1 << 20).is_err());
    assert_eq!(b.append("t", Target::Partition(0), vec![9], 9).unwrap().offset, 6);
}
