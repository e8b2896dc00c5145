mod common;

use chrono::{Datelike, Days, NaiveDate};
use common::*;
use mobipop_core::synth::{aggregate_in_memory, gen_city, SynthConfig};
use mobipop_core::traffic::*;
use mobipop_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn dst_date_loses_only_slot_one() {
    let mut g = rng(1);
    let dst = default_dst();
    for d in days_from(date(2019, 3, 29), 5) {
        let s = batch(&random_matrix(&mut g, d, 6, 1.0), dst);
        for i in 0..6 {
            for t in 0..SLOTS {
                assert_eq!(s.missing[i * SLOTS + t], d == dst && t == 1, "{d} slot {t}");
            }
        }
    }
}

#[test]
fn slots_are_sums_of_eight_quarters() {
    let mut g = rng(2);
    let m = random_matrix(&mut g, date(2019, 4, 2), 5, 1.0);
    let s = aggregate_to_slots(&m);
    for i in 0..5 {
        for t in 0..SLOTS {
            let want: f64 = m.row(i)[t * 8..t * 8 + 8].iter().sum();
            assert!((s.values[i * SLOTS + t] - want).abs() <= 1e-12 * want.max(1.0));
        }
    }
}

#[test]
fn outage_day_is_flagged_and_dropped() {
    let mut g = rng(3);
    let dates = days_from(date(2019, 4, 1), 21);
    let bad = date(2019, 4, 10);
    let days: Vec<SlotMatrix> = dates
        .iter()
        .map(|&d| {
            let level = if d == bad { 0.05 } else { 1.0 };
            let mut m = random_matrix(&mut g, d, 8, 1.0);
            for v in &mut m.values {
                *v = 50.0 * level * (1.0 + 0.1 * g.random::<f64>());
            }
            aggregate_to_slots(&m)
        })
        .collect();
    let agg = accumulate_group("web", Direction::Download, days.clone(), &ids(8), 0.1).unwrap();
    assert_eq!(agg.outage_dates.into_iter().collect::<Vec<_>>(), vec![bad]);
    // Monday to Thursday over three weeks, less the flagged Wednesday
    let wd = SlotAccumulator::offset(0, DayType::Weekday, 0);
    assert_eq!(agg.accumulator.count[wd], 11);
    let kept: Vec<SlotMatrix> = days.into_iter().filter(|d| d.meta.date != bad).collect();
    let clean = accumulate_group("web", Direction::Download, kept, &ids(8), 0.1).unwrap();
    assert_eq!(clean.accumulator, agg.accumulator);
}

#[test]
fn outage_needs_a_week_of_days() {
    let totals: Vec<(NaiveDate, f64)> = days_from(date(2019, 4, 1), 6)
        .into_iter()
        .map(|d| (d, 100.0))
        .collect();
    let mut days = Vec::new();
    let mut g = rng(4);
    for (d, _) in &totals {
        let mut m = random_matrix(&mut g, *d, 2, 1.0);
        if d.day() == 3 {
            m.values.iter_mut().for_each(|v| *v *= 0.0);
        }
        days.push(aggregate_to_slots(&m));
    }
    let agg = accumulate_group("web", Direction::Download, days, &ids(2), 0.1).unwrap();
    assert!(agg.outage_dates.is_empty());
}

#[test]
fn malformed_lines_are_rejected() {
    let m = meta(date(2019, 4, 3));
    let ok = format!("5 {}\n", vec!["1"; 96].join(" "));
    assert!(parse_traffic_file(ok.as_bytes(), m.clone()).is_ok());
    let short = format!("5 {}\n", vec!["1"; 95].join(" "));
    let negative = format!("5 -1 {}\n", vec!["1"; 95].join(" "));
    let text = format!("5 x {}\n", vec!["1"; 95].join(" "));
    let dup = format!("{ok}{ok}");
    for bad in [short, negative, text, dup] {
        assert!(matches!(
            parse_traffic_file(bad.as_bytes(), m.clone()),
            Err(Error::Parse { line: 1 | 2, .. })
        ));
        assert!(parse_slots_fused(bad.as_bytes(), m.clone(), default_dst()).is_err());
    }
}

#[test]
fn file_names_round_trip() {
    for (svc, dir) in [
        ("web", Direction::Upload),
        ("video_hd", Direction::Download),
    ] {
        let m = TrafficFileMeta {
            city: "Big_City".into(),
            service: svc.into(),
            date: date(2019, 5, 7),
            direction: dir,
        };
        for gz in [false, true] {
            assert_eq!(
                TrafficFileMeta::from_file_name("Big_City", &m.file_name(gz)),
                Some(m.clone())
            );
        }
    }
    assert_eq!(
        TrafficFileMeta::from_file_name("Big_City", "Big_City_web_20190507_XL.txt"),
        None
    );
    assert_eq!(
        TrafficFileMeta::from_file_name("Other", "Big_City_web_20190507_UL.txt"),
        None
    );
}

#[test]
fn noise_free_city_recovers_expected_slots() {
    let cfg = SynthConfig {
        nrows: 12,
        ncols: 12,
        n_services: 3,
        n_informative: 2,
        sigma: 0.0,
        start: date(2019, 3, 25),
        end: date(2019, 4, 21),
        outage_dates: vec![date(2019, 4, 9)],
        ..Default::default()
    };
    let (_, truth) = gen_city(&cfg).unwrap();
    let groups = aggregate_in_memory(&truth, default_dst(), default_theta()).unwrap();
    for (gi, agg) in groups.iter().enumerate() {
        assert_eq!(
            agg.outage_dates.iter().copied().collect::<Vec<_>>(),
            cfg.outage_dates
        );
        let service = gi / 2;
        for tile in 0..truth.n_tiles() {
            for dt in DayType::ALL {
                for t in 0..SLOTS {
                    let want = truth.expected_slot(service, agg.direction, dt, t, tile);
                    let got = agg.accumulator.mean(tile, dt, t).unwrap();
                    assert!(
                        (got - want).abs() <= 1e-9 * want.max(1.0),
                        "{got} vs {want}"
                    );
                }
            }
        }
    }
}

/// Days of random volumes over `n_days` consecutive dates around the DST
/// date, with occasional low-volume days.
fn random_days(seed: u64, n_days: u64, n_tiles: usize) -> Vec<TrafficMatrix> {
    let mut g = rng(seed);
    days_from(date(2019, 3, 25), n_days)
        .into_iter()
        .map(|d| {
            let level = if g.random_bool(0.08) { 0.02 } else { 1.0 };
            random_matrix(&mut g, d, n_tiles, level)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn streaming_equals_batch(seed in 0u64..100_000, n in 1usize..12, day in 0u64..4) {
        let mut g = rng(seed);
        let d = date(2019, 3, 29).checked_add_days(Days::new(day)).unwrap();
        let m = random_matrix(&mut g, d, n, 1.0);
        let text = m.to_text();
        let fused = parse_slots_fused(text.as_bytes(), m.meta.clone(), default_dst()).unwrap();
        let b = batch(&m, default_dst());
        prop_assert_eq!(&fused.tile_ids, &b.tile_ids);
        prop_assert_eq!(&fused.missing, &b.missing);
        let bits = |s: &SlotMatrix| s.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&fused), bits(&b));
    }

    #[test]
    fn means_match_group_by(seed in 0u64..100_000, n_days in 7u64..30, n_tiles in 1usize..6) {
        let mats = random_days(seed, n_days, n_tiles);
        let dst = default_dst();
        let days: Vec<SlotMatrix> = mats.iter().map(|m| batch(m, dst)).collect();
        let agg = accumulate_group("web", Direction::Download, days.clone(), &ids(n_tiles), 0.1).unwrap();

        // oracle: outage from raw quarter totals, then a plain group-by
        let totals: Vec<(NaiveDate, f64)> = mats
            .iter()
            .map(|m| {
                let s: f64 = (0..m.values.len())
                    .filter(|&k| !(m.meta.date == dst && (8..16).contains(&(k % QUARTERS))))
                    .map(|k| m.values[k])
                    .sum();
                (m.meta.date, s)
            })
            .collect();
        let mut kept = Vec::new();
        for &(d, t) in &totals {
            let same: Vec<f64> = totals.iter().filter(|(e, _)| DayType::of(*e) == DayType::of(d)).map(|p| p.1).collect();
            let mut s = same.clone();
            s.sort_by(f64::total_cmp);
            let med = if s.len() % 2 == 1 { s[s.len() / 2] } else { 0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2]) };
            if t >= 0.1 * med {
                kept.push(d);
            } else {
                prop_assert!(agg.outage_dates.contains(&d));
            }
        }
        prop_assert_eq!(agg.outage_dates.len(), mats.len() - kept.len());
        let mut records = Vec::new();
        let mut lo_hi = std::collections::BTreeMap::new();
        for m in mats.iter().filter(|m| kept.contains(&m.meta.date)) {
            for tile in 0..n_tiles {
                for slot in 0..SLOTS {
                    if m.meta.date == dst && slot == 1 {
                        continue;
                    }
                    let v: f64 = m.row(tile)[slot * 8..slot * 8 + 8].iter().sum();
                    records.push((m.meta.date, tile, slot, v));
                    let e = lo_hi.entry((tile, DayType::of(m.meta.date), slot)).or_insert((f64::MAX, f64::MIN));
                    e.0 = f64::min(e.0, v);
                    e.1 = f64::max(e.1, v);
                }
            }
        }
        let want = group_by_means(&records);
        for tile in 0..n_tiles {
            for dt in DayType::ALL {
                for slot in 0..SLOTS {
                    let got = agg.accumulator.mean(tile, dt, slot);
                    match want.get(&(tile, dt, slot)) {
                        None => prop_assert!(got.is_none()),
                        Some(&w) => {
                            let g = got.unwrap();
                            prop_assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0));
                            let (lo, hi) = lo_hi[&(tile, dt, slot)];
                            prop_assert!(lo * (1.0 - 1e-12) <= g && g <= hi * (1.0 + 1e-12));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn day_order_does_not_matter(seed in 0u64..100_000, n_days in 7u64..20) {
        let mats = random_days(seed, n_days, 3);
        let mut days: Vec<SlotMatrix> = mats.iter().map(|m| batch(m, default_dst())).collect();
        let a = accumulate_group("web", Direction::Upload, days.clone(), &ids(3), 0.1).unwrap();
        days.shuffle(&mut rng(seed ^ 0xabc));
        let b = accumulate_group("web", Direction::Upload, days, &ids(3), 0.1).unwrap();
        prop_assert_eq!(a.accumulator, b.accumulator);
        prop_assert_eq!(a.outage_dates, b.outage_dates);
    }

    #[test]
    fn masked_cells_never_contribute(seed in 0u64..100_000, spike in 1e3f64..1e9) {
        let mut g = rng(seed);
        let dst = default_dst();
        let m = random_matrix(&mut g, dst, 4, 1.0);
        let mut spiked = m.clone();
        for i in 0..4 {
            for c in DST_COLUMNS {
                spiked.values[i * QUARTERS + c] = spike;
            }
        }
        let mut a = SlotAccumulator::new(ids(4));
        let mut b = SlotAccumulator::new(ids(4));
        accumulate_day(&batch(&m, dst), dst, &mut a).unwrap();
        accumulate_day(&batch(&spiked, dst), dst, &mut b).unwrap();
        prop_assert_eq!(a, b);
    }
}
