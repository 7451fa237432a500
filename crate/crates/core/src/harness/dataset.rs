use std::path::Path;

use crate::error::{Error, Result};
use crate::flowdata::{
    load_camera_mapping, load_flow_matrix, load_segments, write_camera_mapping, write_flow_matrix, write_segments,
    CameraMapping, FlowKind, FlowMatrix, RoadSegment,
};
use crate::graphspec::GraphSpec;
use crate::synthgen::SynthData;

pub const GCT_FILE: &str = "gct_flows.csv";
pub const VEHICLE_FILE: &str = "vehicle_flows.csv";
pub const CAMERA_MAP_FILE: &str = "camera_map.csv";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";

/// Aligned GCT flows, camera flows, camera mapping and road graph.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub gct: FlowMatrix,
    pub veh: FlowMatrix,
    pub mapping: CameraMapping,
    pub graph: GraphSpec,
}

impl Dataset {
    pub fn new(gct: FlowMatrix, veh: FlowMatrix, mapping: CameraMapping, graph: GraphSpec) -> Result<Self> {
        if gct.times() != veh.times() {
            return Err(Error::InvalidData("GCT and vehicle flows cover different intervals".into()));
        }
        if gct.interval_minutes() != veh.interval_minutes() {
            return Err(Error::InvalidData("GCT and vehicle flows use different intervals".into()));
        }
        mapping.validate(gct.node_ids())?;
        for cam in mapping.cameras() {
            if veh.node_index(cam).is_none() {
                return Err(Error::InvalidData(format!("camera `{cam}` has no vehicle-flow column")));
            }
        }
        graph.check_order(gct.node_ids())?;
        Ok(Dataset { gct, veh, mapping, graph })
    }

    /// Reads the standard file set. The graph comes from `adjacency.csv`
    /// when present, otherwise from `segments.csv` with the distance kernel.
    pub fn load(dir: &Path, sigma_m: f64, threshold: f64) -> Result<Self> {
        let gct = load_flow_matrix(&dir.join(GCT_FILE), FlowKind::Gct)?;
        let veh = load_flow_matrix(&dir.join(VEHICLE_FILE), FlowKind::Vehicle)?;
        let mapping = load_camera_mapping(&dir.join(CAMERA_MAP_FILE))?;
        let adj = dir.join(ADJACENCY_FILE);
        let graph = if adj.exists() {
            GraphSpec::load_adjacency(&adj, gct.node_ids())?
        } else {
            let segments = load_segments(&dir.join(SEGMENTS_FILE))?;
            let ordered = order_segments(&segments, gct.node_ids())?;
            GraphSpec::build_distance_graph(&ordered, sigma_m, threshold)?
        };
        Dataset::new(gct, veh, mapping, graph)
    }

    pub fn from_synth(data: &SynthData, sigma_m: f64, threshold: f64) -> Result<Self> {
        let graph = GraphSpec::build_distance_graph(&data.segments, sigma_m, threshold)?;
        Dataset::new(data.gct.clone(), data.veh.clone(), data.mapping.clone(), graph)
    }

    pub fn cameras(&self) -> Vec<String> {
        self.mapping.cameras().map(str::to_string).collect()
    }

    /// GCT node index of every camera, in mapping order.
    pub fn camera_nodes(&self) -> Result<Vec<usize>> {
        self.mapping.gct_indices(self.gct.node_ids())
    }

    /// Vehicle column index of every camera, in mapping order.
    pub fn camera_columns(&self) -> Vec<usize> {
        self.mapping
            .cameras()
            .map(|c| self.veh.node_index(c).expect("validated at construction"))
            .collect()
    }
}

/// Segments reordered to match the GCT column order.
fn order_segments(segments: &[RoadSegment], node_ids: &[String]) -> Result<Vec<RoadSegment>> {
    node_ids
        .iter()
        .map(|id| {
            segments
                .iter()
                .find(|s| s.segment_id.to_string() == *id)
                .cloned()
                .ok_or_else(|| Error::InvalidData(format!("GCT node `{id}` has no segment geometry")))
        })
        .collect()
}

/// Writes the file set read by [`Dataset::load`], with `segments.csv` as the
/// graph source.
pub fn write_dataset(dir: &Path, gct: &FlowMatrix, veh: &FlowMatrix, mapping: &CameraMapping, segments: &[RoadSegment]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_flow_matrix(&dir.join(GCT_FILE), gct)?;
    write_flow_matrix(&dir.join(VEHICLE_FILE), veh)?;
    write_camera_mapping(&dir.join(CAMERA_MAP_FILE), mapping)?;
    write_segments(&dir.join(SEGMENTS_FILE), segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};

    #[test]
    fn synthetic_round_trip_through_files() {
        let data = generate(&SynthConfig {
            days: 2,
            n_nodes: 5,
            m_cameras: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data.gct, &data.veh, &data.mapping, &data.segments).unwrap();
        let loaded = Dataset::load(dir.path(), 500.0, 0.1).unwrap();
        let direct = Dataset::from_synth(&data, 500.0, 0.1).unwrap();
        assert_eq!(loaded.gct, direct.gct);
        assert_eq!(loaded.veh, direct.veh);
        assert_eq!(loaded.graph.weights(), direct.graph.weights());
        assert_eq!(loaded.camera_nodes().unwrap(), vec![0, 1]);
        assert_eq!(loaded.camera_columns(), vec![0, 1]);
    }

    #[test]
    fn every_camera_needs_a_vehicle_column() {
        let data = generate(&SynthConfig {
            days: 2,
            n_nodes: 5,
            m_cameras: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let graph = GraphSpec::identity(data.gct.node_ids().to_vec());
        assert!(Dataset::new(data.gct.clone(), data.veh.clone(), data.mapping.clone(), graph.clone()).is_ok());
        let only_first = data.veh.select_nodes(&[0]).unwrap();
        assert!(Dataset::new(data.gct.clone(), only_first, data.mapping.clone(), graph.clone()).is_err());
        let bad_map = CameraMapping::new(vec![("CamX".into(), "1".into())]).unwrap();
        assert!(Dataset::new(data.gct.clone(), data.veh.clone(), bad_map, graph).is_err());
    }
}
