use serde::{Deserialize, Serialize};

use super::MetricsError;

/// One navigation episode in scene coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavEpisode {
    pub predicted_path: Vec<[f64; 3]>,
    pub goal: [f64; 3],
    /// Length of the shortest start-to-goal path, `L`.
    pub shortest_path_length: f64,
    pub success_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeOutcome {
    pub navigation_error: f64,
    pub success: bool,
    pub oracle_success: bool,
    pub path_length: f64,
    pub spl: f64,
}

/// Aggregates. NE is in scene units, the rates in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NavScores {
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub episodes: usize,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn check(index: usize, ep: &NavEpisode) -> Result<(), MetricsError> {
    let bad = |reason: &str| {
        Err(MetricsError::InvalidEpisode {
            index,
            reason: reason.to_owned(),
        })
    };
    if ep.predicted_path.is_empty() {
        return bad("predicted path is empty");
    }
    if !(ep.success_radius.is_finite() && ep.success_radius > 0.0) {
        return bad("success radius must be positive and finite");
    }
    if !(ep.shortest_path_length.is_finite() && ep.shortest_path_length >= 0.0) {
        return bad("shortest path length must be non-negative and finite");
    }
    if !ep
        .predicted_path
        .iter()
        .chain(std::iter::once(&ep.goal))
        .flatten()
        .all(|v| v.is_finite())
    {
        return bad("non-finite coordinate");
    }
    Ok(())
}

pub fn episode_outcome(ep: &NavEpisode) -> Result<EpisodeOutcome, MetricsError> {
    check(0, ep)?;
    Ok(outcome(ep))
}

fn outcome(ep: &NavEpisode) -> EpisodeOutcome {
    let path = &ep.predicted_path;
    let last = path.last().expect("checked non-empty");
    let ne = dist(last, &ep.goal);
    let success = ne <= ep.success_radius;
    let oracle_success = path.iter().any(|p| dist(p, &ep.goal) <= ep.success_radius);
    let path_length: f64 = path.windows(2).map(|w| dist(&w[0], &w[1])).sum();
    let l = ep.shortest_path_length;
    let spl = if !success {
        0.0
    } else if l == 0.0 && path_length == 0.0 {
        1.0
    } else {
        l / path_length.max(l)
    };
    EpisodeOutcome {
        navigation_error: ne,
        success,
        oracle_success,
        path_length,
        spl,
    }
}

pub fn nav_metrics(episodes: &[NavEpisode]) -> Result<NavScores, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::EmptyEpisodeSet);
    }
    for (i, ep) in episodes.iter().enumerate() {
        check(i, ep)?;
    }
    let outcomes: Vec<EpisodeOutcome> = episodes.iter().map(outcome).collect();
    Ok(aggregate(&outcomes))
}

fn aggregate(outcomes: &[EpisodeOutcome]) -> NavScores {
    let n = outcomes.len() as f64;
    let rate = |f: fn(&EpisodeOutcome) -> bool| {
        100.0 * outcomes.iter().filter(|o| f(o)).count() as f64 / n
    };
    NavScores {
        ne: outcomes.iter().map(|o| o.navigation_error).sum::<f64>() / n,
        sr: rate(|o| o.success),
        osr: rate(|o| o.oracle_success),
        spl: 100.0 * outcomes.iter().map(|o| o.spl).sum::<f64>() / n,
        episodes: outcomes.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(path: &[[f64; 3]], goal: [f64; 3], l: f64) -> NavEpisode {
        NavEpisode {
            predicted_path: path.to_vec(),
            goal,
            shortest_path_length: l,
            success_radius: 1.0,
        }
    }

    #[test]
    fn perfect_episode() {
        let e = ep(&[[0.0; 3], [3.0, 4.0, 0.0]], [3.0, 4.0, 0.0], 5.0);
        let s = nav_metrics(&[e]).unwrap();
        assert_eq!((s.ne, s.sr, s.osr, s.spl), (0.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn never_near_goal() {
        let e = ep(&[[0.0; 3], [1.0, 0.0, 0.0]], [10.0, 0.0, 0.0], 10.0);
        let s = nav_metrics(&[e]).unwrap();
        assert_eq!((s.sr, s.osr, s.spl), (0.0, 0.0, 0.0));
        assert_eq!(s.ne, 9.0);
    }

    #[test]
    fn detour_halves_spl() {
        // P = 10 = 2 L
        let e = ep(
            &[[0.0; 3], [0.0, 5.0, 0.0], [5.0, 5.0, 0.0]],
            [5.0, 5.0, 0.0],
            5.0,
        );
        assert_eq!(episode_outcome(&e).unwrap().spl, 0.5);
    }

    #[test]
    fn oracle_success_without_final_success() {
        let e = ep(
            &[[0.0; 3], [5.0, 0.0, 0.0], [9.0, 0.0, 0.0]],
            [5.0, 0.5, 0.0],
            5.0,
        );
        let s = nav_metrics(&[e]).unwrap();
        assert_eq!((s.sr, s.osr, s.spl), (0.0, 100.0, 0.0));
    }

    #[test]
    fn zero_length_case() {
        let e = ep(&[[1.0, 1.0, 1.0]], [1.0, 1.0, 1.0], 0.0);
        assert_eq!(episode_outcome(&e).unwrap().spl, 1.0);
        // standing still when the goal is elsewhere but within the radius
        let e = ep(&[[1.0, 1.0, 1.0]], [1.5, 1.0, 1.0], 0.5);
        assert_eq!(episode_outcome(&e).unwrap().spl, 1.0);
    }

    #[test]
    fn means_over_episodes() {
        let hit = ep(&[[0.0; 3], [2.0, 0.0, 0.0]], [2.0, 0.0, 0.0], 2.0);
        let miss = ep(&[[0.0; 3]], [4.0, 0.0, 0.0], 4.0);
        let s = nav_metrics(&[hit, miss]).unwrap();
        assert_eq!(
            (s.ne, s.sr, s.osr, s.spl, s.episodes),
            (2.0, 50.0, 50.0, 50.0, 2)
        );
    }

    #[test]
    fn errors() {
        assert_eq!(nav_metrics(&[]), Err(MetricsError::EmptyEpisodeSet));
        let mut e = ep(&[], [0.0; 3], 1.0);
        assert!(matches!(
            nav_metrics(&[e.clone()]),
            Err(MetricsError::InvalidEpisode { index: 0, .. })
        ));
        e.predicted_path.push([0.0; 3]);
        e.success_radius = 0.0;
        assert!(nav_metrics(&[e]).is_err());
    }
}
