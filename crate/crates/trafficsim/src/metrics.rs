use crate::error::{Result, SimError};
use crate::sim::VehicleRecord;

/// Average travel time in seconds.
///
/// Completed trips contribute `t_leave - t_enter`. When `t_end` is given,
/// vehicles still inside contribute `t_end - t_enter`; otherwise they are
/// skipped.
pub fn average_travel_time(records: &[VehicleRecord], t_end: Option<u64>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        let leave = match (r.t_leave, t_end) {
            (Some(l), _) => l,
            (None, Some(end)) => end,
            (None, None) => continue,
        };
        total += leave.saturating_sub(r.t_enter) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(SimError::NoTraffic);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(enter: u64, leave: Option<u64>) -> VehicleRecord {
        VehicleRecord {
            id: 0,
            route: vec![],
            t_enter: enter,
            t_leave: leave,
        }
    }

    #[test]
    fn hand_cases() {
        let two = [rec(0, Some(100)), rec(10, Some(130))];
        assert_eq!(average_travel_time(&two, None).unwrap(), 110.0);
        assert_eq!(average_travel_time(&[rec(5, Some(20))], None).unwrap(), 15.0);
        let same = [rec(0, Some(40)), rec(7, Some(47)), rec(9, Some(49))];
        assert_eq!(average_travel_time(&same, None).unwrap(), 40.0);
    }

    #[test]
    fn incomplete_trips_use_episode_end() {
        let recs = [rec(0, Some(100)), rec(50, None)];
        assert_eq!(average_travel_time(&recs, Some(250)).unwrap(), 150.0);
        assert_eq!(average_travel_time(&recs, None).unwrap(), 100.0);
    }

    #[test]
    fn no_vehicles_is_an_error() {
        assert_eq!(average_travel_time(&[], Some(10)), Err(SimError::NoTraffic));
    }
}
