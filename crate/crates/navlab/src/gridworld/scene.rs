use serde::{Deserialize, Serialize};
use std::path::Path;

/// Scene files carry this version in their `version` field.
pub const SCENE_SCHEMA_VERSION: u32 = 1;

/// Axis-aligned rectangle in meters. Containment is half-open:
/// `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    fn inside(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= width + 1e-9
            && self.y + self.h <= height + 1e-9
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("failed to read scene file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scene parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported scene schema version {0} (expected {SCENE_SCHEMA_VERSION})")]
    UnsupportedVersion(u32),
    #[error("scene extent must be positive, got ({0}, {1})")]
    BadExtent(f64, f64),
    #[error("obstacle {index} {rect:?} lies outside the scene extent")]
    ObstacleOutsideExtent { index: usize, rect: Rect },
    #[error("spawn region {0:?} lies outside the scene extent")]
    SpawnOutsideExtent(Rect),
    #[error("goal_count must be at least 1, got {0}")]
    BadGoalCount(usize),
}

/// A closed rectangular world: physical extent, axis-aligned obstacles,
/// a robot spawn region, and the number of ordered goals. Boundary walls
/// are implicit; rasterization always closes the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneFile", into = "SceneFile")]
pub struct Scene {
    pub name: String,
    pub extent: (f64, f64),
    pub obstacles: Vec<Rect>,
    pub spawn: Rect,
    pub goal_count: usize,
}

/// On-disk schema: `{version, name, extent: [w,h], obstacles: [[x,y,w,h],..],
/// spawn: [x,y,w,h], goal_count}`, units meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    name: String,
    extent: [f64; 2],
    obstacles: Vec<[f64; 4]>,
    spawn: [f64; 4],
    goal_count: usize,
}

impl From<Scene> for SceneFile {
    fn from(s: Scene) -> Self {
        SceneFile {
            version: SCENE_SCHEMA_VERSION,
            name: s.name.clone(),
            extent: [s.extent.0, s.extent.1],
            obstacles: s.obstacles.iter().map(|r| r.as_array()).collect(),
            spawn: s.spawn.as_array(),
            goal_count: s.goal_count,
        }
    }
}

impl TryFrom<SceneFile> for Scene {
    type Error = SceneError;

    fn try_from(f: SceneFile) -> Result<Scene, SceneError> {
        if f.version != SCENE_SCHEMA_VERSION {
            return Err(SceneError::UnsupportedVersion(f.version));
        }
        let scene = Scene {
            name: f.name,
            extent: (f.extent[0], f.extent[1]),
            obstacles: f
                .obstacles
                .iter()
                .map(|a| Rect::new(a[0], a[1], a[2], a[3]))
                .collect(),
            spawn: Rect::new(f.spawn[0], f.spawn[1], f.spawn[2], f.spawn[3]),
            goal_count: f.goal_count,
        };
        scene.validate()?;
        Ok(scene)
    }
}

impl Scene {
    pub fn new(
        name: &str,
        extent: (f64, f64),
        obstacles: Vec<Rect>,
        spawn: Rect,
        goal_count: usize,
    ) -> Result<Scene, SceneError> {
        let s = Scene {
            name: name.to_string(),
            extent,
            obstacles,
            spawn,
            goal_count,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let (w, h) = self.extent;
        if !(w > 0.0 && h > 0.0) {
            return Err(SceneError::BadExtent(w, h));
        }
        for (index, rect) in self.obstacles.iter().enumerate() {
            if !rect.inside(w, h) {
                return Err(SceneError::ObstacleOutsideExtent { index, rect: *rect });
            }
        }
        if !self.spawn.inside(w, h) {
            return Err(SceneError::SpawnOutsideExtent(self.spawn));
        }
        if self.goal_count == 0 {
            return Err(SceneError::BadGoalCount(self.goal_count));
        }
        Ok(())
    }

    /// True if the point is inside any obstacle rectangle.
    pub fn point_in_obstacle(&self, x: f64, y: f64) -> bool {
        self.obstacles.iter().any(|r| r.contains(x, y))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene serializes")
    }

    /// The 8.08 x 4.48 m training layout with five ordered goals.
    pub fn training() -> Scene {
        Scene::new(
            "train",
            (8.08, 4.48),
            vec![
                Rect::new(1.90, 0.00, 0.50, 1.40),
                Rect::new(1.90, 3.10, 0.50, 1.38),
                Rect::new(3.90, 1.70, 0.70, 1.10),
                Rect::new(5.90, 0.00, 0.50, 1.20),
                Rect::new(5.90, 3.20, 0.50, 1.28),
            ],
            Rect::new(0.25, 0.25, 7.58, 3.98),
            5,
        )
        .expect("bundled training scene is valid")
    }

    /// Held-out layout with the same extent as the training scene.
    pub fn held_out() -> Scene {
        Scene::new(
            "test",
            (8.08, 4.48),
            vec![
                Rect::new(0.00, 1.90, 1.30, 0.55),
                Rect::new(2.90, 0.00, 0.55, 1.60),
                Rect::new(2.90, 2.90, 0.55, 1.58),
                Rect::new(5.10, 1.40, 1.10, 0.60),
                Rect::new(6.80, 2.90, 1.28, 0.55),
            ],
            Rect::new(0.25, 0.25, 7.58, 3.98),
            5,
        )
        .expect("bundled held-out scene is valid")
    }

    /// Reduced 4.0 x 3.0 m layout with three ordered goals for quick runs.
    pub fn desk() -> Scene {
        Scene::new(
            "desk",
            (4.0, 3.0),
            vec![
                Rect::new(1.70, 1.15, 0.60, 0.70),
                Rect::new(3.30, 0.00, 0.35, 0.90),
            ],
            Rect::new(0.25, 0.25, 3.50, 2.50),
            3,
        )
        .expect("bundled desk scene is valid")
    }

    pub fn by_name(name: &str) -> Option<Scene> {
        match name {
            "train" => Some(Scene::training()),
            "test" => Some(Scene::held_out()),
            "desk" => Some(Scene::desk()),
            _ => None,
        }
    }
}

/// Load and validate a scene file.
pub fn load_scene<P: AsRef<Path>>(path: P) -> Result<Scene, SceneError> {
    let path_str = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path.as_ref()).map_err(|source| SceneError::Io {
        path: path_str.clone(),
        source,
    })?;
    // toml's error messages carry line/column context.
    toml::from_str::<Scene>(&text).map_err(|e| match classify(&e) {
        Some(scene_err) => scene_err,
        None => SceneError::Parse {
            path: path_str,
            message: e.to_string(),
        },
    })
}

// Validation errors travel through serde as message strings; map the ones we
// raised back to their typed variants so callers see the violated invariant.
fn classify(e: &toml::de::Error) -> Option<SceneError> {
    let msg = e.to_string();
    if msg.contains("unsupported scene schema version") {
        // The concrete version is unrecoverable from the message; report 0.
        return Some(SceneError::Parse {
            path: String::new(),
            message: msg,
        });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_scene_matches_extent() {
        let s = Scene::training();
        assert_eq!(s.extent, (8.08, 4.48));
        assert_eq!(s.goal_count, 5);
    }

    #[test]
    fn obstacle_outside_extent_rejected() {
        let err = Scene::new(
            "bad",
            (2.0, 2.0),
            vec![Rect::new(1.5, 0.5, 1.0, 0.5)],
            Rect::new(0.1, 0.1, 1.0, 1.0),
            3,
        )
        .unwrap_err();
        assert!(matches!(err, SceneError::ObstacleOutsideExtent { index: 0, .. }));
    }

    #[test]
    fn empty_obstacle_list_is_fine() {
        let s = Scene::new("empty", (2.0, 2.0), vec![], Rect::new(0.1, 0.1, 1.8, 1.8), 1).unwrap();
        assert!(s.obstacles.is_empty());
    }

    #[test]
    fn scene_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.toml");
        let s = Scene::held_out();
        std::fs::write(&path, s.to_toml()).unwrap();
        let loaded = load_scene(&path).unwrap();
        assert_eq!(s, loaded);
    }

    #[test]
    fn load_rejects_bad_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.toml");
        std::fs::write(
            &path,
            "version = 99\nname = \"x\"\nextent = [2.0, 2.0]\nobstacles = []\nspawn = [0.1, 0.1, 1.0, 1.0]\ngoal_count = 1\n",
        )
        .unwrap();
        assert!(load_scene(&path).is_err());
    }

    #[test]
    fn load_reports_parse_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.toml");
        std::fs::write(&path, "version = \n").unwrap();
        let err = load_scene(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parse error"), "{msg}");
    }
}
