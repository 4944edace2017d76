//! Per-face features: area, interior angles, face normal and the dot
//! products of the face normal with the three vertex normals.

use meshmae::mesh::face_features;
use meshmae::synth::icosphere;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sphere = icosphere(2);
    let feats = face_features(&sphere)?;
    let total: f64 = feats.iter().map(|f| f.area).sum();
    println!("{} faces, total area {total:.4} (unit sphere: {:.4})", feats.len(), 4.0 * std::f64::consts::PI);

    let f = &feats[0];
    println!("face 0");
    println!("  area            {:.5}", f.area);
    println!("  angles          {:?}", f.interior_angles.map(|a| (a.to_degrees() * 100.0).round() / 100.0));
    println!("  normal          {:.4?}", f.face_normal.as_slice());
    println!("  normal . vertex {:.4?}", f.normal_vertex_dots);
    Ok(())
}
