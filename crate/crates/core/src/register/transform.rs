use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::RegisterError;

/// Rigid motion about a fixed centre: `p ↦ R·(p − c) + c + t`.
///
/// `R = Rz(a)·Ry(b)·Rx(c)` for `euler_zyx = [a, b, c]` (intrinsic Z-Y-X).
/// By convention the transform maps points of the fixed (template) space into
/// the moving space, which is what resampling needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub euler_zyx: [f64; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::identity()
    }
}

const VERSION_LINE: &str = "rigid-v1";

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { euler_zyx: [0.0; 3], translation: [0.0; 3], center: [0.0; 3] }
    }

    pub fn new(euler_zyx: [f64; 3], translation: [f64; 3], center: [f64; 3]) -> Self {
        RigidTransform { euler_zyx, translation, center }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let [a, b, c] = self.euler_zyx;
        let rz = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(b.cos(), 0.0, b.sin(), 0.0, 1.0, 0.0, -b.sin(), 0.0, b.cos());
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c.cos(), -c.sin(), 0.0, c.sin(), c.cos());
        rz * ry * rx
    }

    /// Homogeneous 4×4 matrix of the map.
    pub fn matrix(&self) -> Matrix4<f64> {
        let r = self.rotation();
        let c = Vector3::from(self.center);
        let off = c + Vector3::from(self.translation) - r * c;
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&off);
        m
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let c = Vector3::from(self.center);
        let q = r * (Vector3::from(p) - c) + c + Vector3::from(self.translation);
        [q[0], q[1], q[2]]
    }

    /// The inverse map, expressed about the same centre.
    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        let t = -(rt * Vector3::from(self.translation));
        RigidTransform { euler_zyx: euler_from_rotation(&rt), translation: [t[0], t[1], t[2]], center: self.center }
    }

    /// Rotation angle (radians) of the relative rotation between two transforms.
    pub fn angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation().transpose() * other.rotation();
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{VERSION_LINE}");
        let _ = writeln!(
            s,
            "# R = Rz(a)*Ry(b)*Rx(c), intrinsic Z-Y-X; p_moving = R*(p_fixed - center) + center + translation"
        );
        let fmt = |v: [f64; 3]| format!("{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]);
        let _ = writeln!(s, "euler_zyx_rad: {}", fmt(self.euler_zyx));
        let _ = writeln!(s, "translation_mm: {}", fmt(self.translation));
        let _ = writeln!(s, "center_mm: {}", fmt(self.center));
        s
    }

    pub fn parse(text: &str) -> Result<Self, RegisterError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some(VERSION_LINE) => {}
            other => {
                return Err(RegisterError::Parse(format!("expected version line `{VERSION_LINE}`, got {other:?}")))
            }
        }
        let mut fields: [Option<[f64; 3]>; 3] = [None; 3];
        const KEYS: [&str; 3] = ["euler_zyx_rad", "translation_mm", "center_mm"];
        for line in lines {
            let (key, rest) =
                line.split_once(':').ok_or_else(|| RegisterError::Parse(format!("malformed line `{line}`")))?;
            let slot = KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| RegisterError::Parse(format!("unknown key `{}`", key.trim())))?;
            let nums = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| RegisterError::Parse(format!("`{t}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if nums.len() != 3 {
                return Err(RegisterError::Parse(format!("`{}` needs 3 numbers, found {}", KEYS[slot], nums.len())));
            }
            if fields[slot].replace([nums[0], nums[1], nums[2]]).is_some() {
                return Err(RegisterError::Parse(format!("duplicate key `{}`", KEYS[slot])));
            }
        }
        let get = |i: usize| fields[i].ok_or_else(|| RegisterError::Parse(format!("missing `{}`", KEYS[i])));
        Ok(RigidTransform { euler_zyx: get(0)?, translation: get(1)?, center: get(2)? })
    }
}

/// Z-Y-X Euler angles of a rotation matrix.
pub fn euler_from_rotation(r: &Matrix3<f64>) -> [f64; 3] {
    let b = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    if r[(2, 0)].abs() < 1.0 - 1e-12 {
        [r[(1, 0)].atan2(r[(0, 0)]), b, r[(2, 1)].atan2(r[(2, 2)])]
    } else {
        // gimbal lock: fold everything into the first angle
        [(-r[(0, 1)]).atan2(r[(1, 1)]), b, 0.0]
    }
}

pub fn save_transform(t: &RigidTransform, path: impl AsRef<Path>) -> Result<(), RegisterError> {
    let path = path.as_ref();
    std::fs::write(path, t.to_text()).map_err(|source| RegisterError::Io { path: path.to_path_buf(), source })
}

pub fn load_transform(path: impl AsRef<Path>) -> Result<RigidTransform, RegisterError> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|source| RegisterError::Io { path: path.to_path_buf(), source })?;
    RigidTransform::parse(&text)
}
