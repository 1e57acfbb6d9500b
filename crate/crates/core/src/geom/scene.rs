//! Text scene descriptions: a target shape to reconstruct and a coarse prior.
//!
//! The format is line-oriented; see `docs/scene-format.md` for the grammar.
//! Each line adds a primitive to either the `target` or the `prior` section,
//! or sets that section's blend sharpness. A section with several primitives
//! combines them with a hard union, or a smooth union when `blend` is set.
//! When no prior is given, the prior defaults to a smooth-union version of
//! the target primitives with a soft blend — a deliberately coarse stand-in.

use crate::error::{Error, Result};
use crate::geom::{AnalyticSdf, Vec3};

/// Blend sharpness used for the default (derived) prior.
const DEFAULT_PRIOR_BLEND: f64 = 8.0;

/// A parsed scene: what to reconstruct and what the field starts from.
#[derive(Clone, Debug)]
pub struct SceneDescription {
    pub target: AnalyticSdf,
    pub prior: AnalyticSdf,
}

impl SceneDescription {
    /// Normalise target and prior together so the **target's** bounding box
    /// fits `[-1, 1]^3` with the given margin; the prior receives the same
    /// transform so the two stay aligned.
    pub fn normalized(&self, margin: f64) -> SceneDescription {
        let (target, offset, scale) = self.target.normalized_to_domain(margin);
        let prior = self.prior.clone().transformed(offset, scale);
        SceneDescription { target, prior }
    }
}

#[derive(Default)]
struct Section {
    primitives: Vec<AnalyticSdf>,
    blend: Option<f64>,
}

impl Section {
    fn build(self) -> Option<AnalyticSdf> {
        let mut prims = self.primitives;
        match (prims.len(), self.blend) {
            (0, _) => None,
            (1, None) => Some(prims.remove(0)),
            (_, None) => Some(AnalyticSdf::Union(prims)),
            (_, Some(k)) => Some(AnalyticSdf::SmoothUnion { children: prims, k }),
        }
    }
}

/// Parse a scene description from text.
pub fn parse_scene(text: &str) -> Result<SceneDescription> {
    let mut target = Section::default();
    let mut prior = Section::default();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let section = match tokens[0] {
            "target" => &mut target,
            "prior" => &mut prior,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown section '{other}'; expected 'target' or 'prior'"),
                })
            }
        };
        if tokens.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: "missing primitive kind after section name".into(),
            });
        }
        let args = parse_numbers(&tokens[2..], line_no)?;
        match tokens[1] {
            "blend" => {
                let k = expect_args(&args, 1, "blend K", line_no)?[0];
                if k <= 0.0 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("blend sharpness must be positive, got {k}"),
                    });
                }
                section.blend = Some(k);
            }
            "sphere" => {
                let a = expect_args(&args, 4, "sphere CX CY CZ R", line_no)?;
                check_positive(a[3], "radius", line_no)?;
                section.primitives.push(AnalyticSdf::Sphere {
                    center: Vec3::new(a[0], a[1], a[2]),
                    radius: a[3],
                });
            }
            "box" => {
                let a = expect_args(&args, 6, "box CX CY CZ HX HY HZ", line_no)?;
                for &h in &a[3..6] {
                    check_positive(h, "half extent", line_no)?;
                }
                section.primitives.push(AnalyticSdf::Cuboid {
                    center: Vec3::new(a[0], a[1], a[2]),
                    half_extents: Vec3::new(a[3], a[4], a[5]),
                });
            }
            "capsule" => {
                let a = expect_args(&args, 7, "capsule AX AY AZ BX BY BZ R", line_no)?;
                check_positive(a[6], "radius", line_no)?;
                let pa = Vec3::new(a[0], a[1], a[2]);
                let pb = Vec3::new(a[3], a[4], a[5]);
                if (pa - pb).norm() < 1e-12 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "capsule endpoints coincide; use a sphere instead".into(),
                    });
                }
                section.primitives.push(AnalyticSdf::Capsule { a: pa, b: pb, radius: a[6] });
            }
            "torus" => {
                let a = expect_args(&args, 5, "torus CX CY CZ MAJOR MINOR", line_no)?;
                check_positive(a[3], "major radius", line_no)?;
                check_positive(a[4], "minor radius", line_no)?;
                section.primitives.push(AnalyticSdf::Torus {
                    center: Vec3::new(a[0], a[1], a[2]),
                    major: a[3],
                    minor: a[4],
                });
            }
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "unknown primitive '{other}'; expected sphere, box, capsule, torus or blend"
                    ),
                })
            }
        }
    }

    let target_prims = target.primitives.clone();
    let target = target.build().ok_or_else(|| Error::Parse {
        line: 0,
        msg: "scene has no target primitives".into(),
    })?;
    let prior = prior.build().unwrap_or_else(|| {
        if target_prims.len() == 1 {
            target_prims.into_iter().next().unwrap()
        } else {
            AnalyticSdf::SmoothUnion { children: target_prims, k: DEFAULT_PRIOR_BLEND }
        }
    });
    Ok(SceneDescription { target, prior })
}

fn parse_numbers(tokens: &[&str], line: usize) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("expected a number, got '{t}'"),
            })
        })
        .collect()
}

fn expect_args<'a>(args: &'a [f64], n: usize, usage: &str, line: usize) -> Result<&'a [f64]> {
    if args.len() != n {
        return Err(Error::Parse {
            line,
            msg: format!("expected {n} numbers ({usage}), got {}", args.len()),
        });
    }
    Ok(args)
}

fn check_positive(v: f64, what: &str, line: usize) -> Result<()> {
    if v <= 0.0 {
        return Err(Error::Parse { line, msg: format!("{what} must be positive, got {v}") });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_sphere_scene() {
        let s = parse_scene("target sphere 0 0 0 0.5\n").unwrap();
        assert_relative_eq!(s.target.eval(Vec3::ZERO), -0.5);
        // Prior defaults to the same single primitive.
        assert_relative_eq!(s.prior.eval(Vec3::ZERO), -0.5);
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "
# a scene
target sphere 0 0 0 0.5  # trailing comment

prior sphere 0 0 0 0.4
";
        let s = parse_scene(text).unwrap();
        assert_relative_eq!(s.prior.eval(Vec3::ZERO), -0.4);
    }

    #[test]
    fn blended_target() {
        let text = "
target blend 10
target sphere -0.3 0 0 0.25
target sphere 0.3 0 0 0.25
";
        let s = parse_scene(text).unwrap();
        // Smooth union undercuts the hard min between the two spheres.
        let mid = Vec3::ZERO;
        let hard = 0.3 - 0.25;
        assert!(s.target.eval(mid) < hard);
    }

    #[test]
    fn multi_primitive_default_prior_is_smooth() {
        let text = "
target sphere -0.3 0 0 0.25
target sphere 0.3 0 0 0.25
";
        let s = parse_scene(text).unwrap();
        // Hard-union target, smooth default prior: prior <= target everywhere.
        let p = Vec3::new(0.0, 0.1, 0.0);
        assert!(s.prior.eval(p) <= s.target.eval(p) + 1e-12);
    }

    #[test]
    fn error_cases_name_the_line() {
        let err = parse_scene("target sphere 0 0 0\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_scene("target sphere 0 0 0 0.5\nwall box 0 0 0 1 1 1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_scene("").is_err());
        assert!(parse_scene("target sphere 0 0 0 -1\n").is_err());
        assert!(parse_scene("target capsule 0 0 0 0 0 0 0.1\n").is_err());
    }

    #[test]
    fn normalization_applies_same_transform_to_both() {
        let text = "
target sphere 0 2 0 1
prior sphere 0 2 0 0.8
";
        let s = parse_scene(text).unwrap().normalized(0.1);
        // Target now centred at origin with radius 0.9.
        assert_relative_eq!(s.target.eval(Vec3::ZERO), -0.9, epsilon = 1e-12);
        // Prior scaled by the same factor: radius 0.72, same centre.
        assert_relative_eq!(s.prior.eval(Vec3::ZERO), -0.72, epsilon = 1e-12);
    }
}
