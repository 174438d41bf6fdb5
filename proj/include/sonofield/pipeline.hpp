#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "sonofield/dataset.hpp"
#include "sonofield/formats.hpp"
#include "sonofield/grid_field.hpp"
#include "sonofield/localizer.hpp"
#include "sonofield/phantom.hpp"
#include "sonofield/refine.hpp"
#include "sonofield/train.hpp"

namespace sonofield {

/// Every tunable of the end-to-end pipeline. Presets fill it; a JSON config
/// file may override any subset of keys (see README).
struct PipelineConfig {
  std::string preset = "desk";
  PhantomSpec phantom;
  BModeParams bmode;
  ProbeGeometry probe;
  TrajectoryKind trajectory = TrajectoryKind::kCircular;
  TrajectoryParams scan;
  GridConfig grid;  // domain is derived from the scan at train time
  TrainConfig train;
  TrajectoryParams gallery;  // rcm-grid poses rendered for the hash gallery
  LocalizerConfig localizer;
  RefineConfig refine;
  int threads = 1;
};

/// "desk" (laptop-scale, the default) or "paper" (the published
/// hyperparameters). Unknown names raise kConfig.
PipelineConfig preset_config(std::string_view name);

/// Applies a JSON object of overrides; unknown keys raise kConfig and
/// malformed JSON raises kParse.
void apply_config_json(PipelineConfig& config, std::string_view text);

/// Canonical JSON dump of the effective configuration.
std::string config_to_json(const PipelineConfig& config);

/// Seeds every stage from one value so a run is reproducible from --seed.
void set_seed(PipelineConfig& config, std::uint64_t seed);

TrajectoryKind parse_trajectory(std::string_view name);
std::string_view trajectory_name(TrajectoryKind kind);

/// Fresh field whose domain box covers the dataset's pixels.
ImpedanceField init_field_for(const ScanDataset& dataset, const PipelineConfig& config);

/// Rendered and 8-bit quantized view, then PGM-encoded. The CLI `render` and
/// the service `/render` both go through this.
std::vector<unsigned char> render_pgm(const ImpedanceField& field, const Pose& pose, const ProbeGeometry& geom,
                                      int threads);

struct GalleryImages {
  std::vector<ImageGray> images;
  std::vector<int> labels;
  std::vector<Pose> poses;
};

/// Renders the configured rcm-grid gallery poses from a trained field.
GalleryImages render_gallery(const ImpedanceField& field, const ProbeGeometry& geom, const PipelineConfig& config);

/// Pose written as {"position_mm": [...], "euler_zyx_rad": [...]}.
std::string pose_to_json(const Pose& pose);
Pose pose_from_json(std::string_view text);

/// "px,py,pz,rz,ry,rx" in mm and radians.
Pose parse_pose_list(std::string_view text);

/// Shortest round-trip decimal; infinity prints as "inf".
std::string format_real(double value);

}  // namespace sonofield
