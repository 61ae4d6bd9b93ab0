#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "retovla/tensor.hpp"

namespace retovla::env {

inline constexpr std::size_t kGrid = 8;
inline constexpr std::size_t kCells = kGrid * kGrid;
inline constexpr std::size_t kClasses = 4;
/// occupancy, class one-hot (4), height, target marker
inline constexpr std::size_t kChannels = 3 + kClasses;
inline constexpr std::size_t kInstructionLen = 5;
inline constexpr std::size_t kVocab = 8;
inline constexpr std::size_t kPadToken = 7;
inline constexpr std::size_t kActionDim = 4;
inline constexpr std::size_t kStateDim = 4;
inline constexpr double kGraspRadius = 0.5;
inline constexpr double kSuccessRadius = 0.5;

enum class TaskKind : std::uint8_t { local_pick = 0, global_place = 1, sequence = 2 };

inline constexpr std::array<TaskKind, 3> kAllKinds{TaskKind::local_pick, TaskKind::global_place, TaskKind::sequence};

std::string_view kind_name(TaskKind kind);
/// Throws std::invalid_argument for an unknown name.
TaskKind parse_kind(std::string_view name);

struct Point {
  double x = 0.0;
  double y = 0.0;

  bool operator==(const Point&) const = default;
};

double distance(Point a, Point b);
/// Center of a row-major cell index (x = column, y = row).
Point cell_center(std::size_t cell);
/// Cell containing a point, or nullopt outside the grid.
std::optional<std::size_t> cell_of(Point p);

struct SceneObject {
  std::size_t cell = 0;  // starting cell
  std::size_t cls = 0;
  double height = 0.0;

  bool operator==(const SceneObject&) const = default;
};

/// Initial layout: at most one object per cell, objects sorted by cell.
struct GridScene {
  std::vector<SceneObject> objects;
  std::optional<std::size_t> marker;
  Point gripper;

  /// Row-major [cell][channel] values.
  std::vector<float> channels() const;
  /// Rebuilds a scene from channels; throws std::invalid_argument on malformed data.
  static GridScene from_channels(std::span<const float> channels, Point gripper);
  const SceneObject* object_at(std::size_t cell) const;

  bool operator==(const GridScene&) const = default;
};

/// Task plus the predicate parameters implied by its instruction and scene.
struct TaskSpec {
  TaskKind kind = TaskKind::local_pick;
  std::array<std::uint16_t, kInstructionLen> tokens{};
  /// local_pick: object to grasp. global_place: placement cell. sequence: bin cell.
  std::size_t target_cell = 0;
  /// global_place: starting cell of the object to carry.
  std::size_t carried_cell = 0;
  /// sequence: starting cells of the objects in deposit order.
  std::vector<std::size_t> order;

  bool operator==(const TaskSpec&) const = default;
};

/// Recovers predicate parameters from the instruction and layout.
/// Throws std::invalid_argument when the task is unsatisfiable in the scene.
TaskSpec derive_task(TaskKind kind, const std::array<std::uint16_t, kInstructionLen>& tokens, const GridScene& scene);

/// Empty cell nearest the centroid of the three anchor-class objects; nullopt on ties
/// or when the anchors are not exactly three.
std::optional<std::size_t> relational_target(const GridScene& scene, std::size_t anchor_class);

struct Episode {
  GridScene scene;
  TaskSpec task;
  std::size_t horizon = 8;
  std::vector<Tensor> expert;  // chunks of shape [horizon, kActionDim]
  Tensor patches;               // [kCells, d_vlm] rendering of the initial scene

  std::size_t chunk_count() const { return expert.size(); }
};

/// Fixed linear embedding of each cell's channels plus a cell-position sinusoid: [kCells, d_vlm].
Tensor render_patches(std::span<const float> channels, std::size_t d_vlm);

struct RolloutResult {
  bool success = false;
  double distance = 0.0;
  bool subgoals = false;
};

/// Kinematic replay state.
class World {
 public:
  World(const GridScene& scene, const TaskSpec& task, std::size_t horizon);
  explicit World(const Episode& episode) : World(episode.scene, episode.task, episode.horizon) {}

  /// One action row (dx, dy, dz, gripper), each clamped to [-1, 1].
  void step(std::span<const double> action);
  /// Every row of a [horizon, kActionDim] chunk.
  void apply(const Tensor& chunk);

  /// Current grid channels; held and deposited objects are not on the grid.
  std::vector<float> channels() const;
  Tensor patches(std::size_t d_vlm) const { return render_patches(channels(), d_vlm); }
  /// (x, y) scaled to [-1, 1], gripper closed (+1) or open (-1), holding (1) or empty (0).
  std::array<double, kStateDim> state() const;
  RolloutResult result() const;

  Point gripper() const { return gripper_; }
  double z() const { return z_; }
  std::optional<std::size_t> held() const { return held_; }
  const std::vector<std::size_t>& deposits() const { return deposits_; }

 private:
  enum class Status : std::uint8_t { on_grid, held, deposited };
  struct Body {
    SceneObject info;
    Point pos;
    Status status = Status::on_grid;
  };

  std::optional<std::size_t> body_on_cell(std::size_t cell) const;
  void grasp();
  void release();

  std::vector<Body> bodies_;
  std::optional<std::size_t> marker_;
  TaskSpec task_;
  std::size_t horizon_;
  Point gripper_;
  double z_ = 1.0;
  bool closed_ = false;
  std::optional<std::size_t> held_;
  std::vector<std::size_t> deposits_;  // starting cells, in deposit order
};

/// Move-then-toggle chunks, normalized so that one unit is 8 / horizon cells per step,
/// and rounded to single precision. Throws std::invalid_argument when unsatisfiable.
std::vector<Tensor> expert_actions(const GridScene& scene, const TaskSpec& task, std::size_t horizon);

RolloutResult evaluate_rollout(const Episode& episode, std::span<const Tensor> chunks);

/// Retries internally until the expert demonstration satisfies the task predicate.
Episode generate_episode(TaskKind kind, std::mt19937_64& rng, std::size_t horizon = 8, std::size_t d_vlm = 64);
/// Episode i draws from its own generator seeded by (seed, kind, i).
std::vector<Episode> generate_episodes(TaskKind kind, std::size_t count, std::uint64_t seed, std::size_t horizon = 8,
                                       std::size_t d_vlm = 64);

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DatasetMagicError : DatasetError {
  using DatasetError::DatasetError;
};
struct DatasetVersionError : DatasetError {
  using DatasetError::DatasetError;
};

inline constexpr std::uint16_t kDatasetVersion = 1;

std::vector<unsigned char> serialize_dataset(std::span<const Episode> episodes);
/// Truncation raises binio::TruncatedError.
std::vector<Episode> deserialize_dataset(std::span<const unsigned char> bytes, std::size_t d_vlm = 64);
void write_dataset(std::span<const Episode> episodes, const std::string& path);
std::vector<Episode> read_dataset(const std::string& path, std::size_t d_vlm = 64);

}  // namespace retovla::env
