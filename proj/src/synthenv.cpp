#include "retovla/synthenv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>

#include "retovla/binio.hpp"
#include "retovla/nn.hpp"

namespace retovla::env {

namespace {

constexpr char kDatasetMagic[4] = {'R', 'T', 'V', 'D'};
constexpr std::uint64_t kRenderSeed = 0x52454e4445524d41ULL;
constexpr std::size_t kMaxAttempts = 10000;

enum Channel : std::size_t { kOccupancy = 0, kClassBase = 1, kHeight = 1 + kClasses, kMarker = 2 + kClasses };

std::size_t class_token(std::size_t cls) { return 3 + cls; }

std::optional<std::size_t> token_class(std::uint16_t token) {
  if (token >= 3 && token < 3 + kClasses) return token - 3;
  return std::nullopt;
}

// Round to single precision. The volatile store keeps GCC 11's SLP vectorizer from
// dropping the narrowing conversion at -O3.
double to_f32(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

void write_cell(std::vector<float>& out, std::size_t cell, const SceneObject& obj) {
  float* c = out.data() + cell * kChannels;
  c[kOccupancy] = 1.0f;
  c[kClassBase + obj.cls] = 1.0f;
  c[kHeight] = static_cast<float>(obj.height);
}

std::vector<std::size_t> neighbours(std::size_t cell) {
  const std::size_t col = cell % kGrid, row = cell / kGrid;
  std::vector<std::size_t> out;
  if (col > 0) out.push_back(cell - 1);
  if (col + 1 < kGrid) out.push_back(cell + 1);
  if (row > 0) out.push_back(cell - kGrid);
  if (row + 1 < kGrid) out.push_back(cell + kGrid);
  return out;
}

const SceneObject* unique_of_class(const GridScene& scene, std::size_t cls) {
  const SceneObject* found = nullptr;
  for (const auto& o : scene.objects) {
    if (o.cls != cls) continue;
    if (found != nullptr) return nullptr;
    found = &o;
  }
  return found;
}

Tensor move_chunk(Point from, Point to, std::size_t horizon, double grip_before, double grip_after) {
  std::vector<double> rows(horizon * kActionDim);
  const double dx = to_f32((to.x - from.x) / static_cast<double>(kGrid));
  const double dy = to_f32((to.y - from.y) / static_cast<double>(kGrid));
  for (std::size_t h = 0; h < horizon; ++h) {
    double* r = rows.data() + h * kActionDim;
    r[0] = dx;
    r[1] = dy;
    r[2] = 0.0;
    r[3] = h + 1 == horizon ? grip_after : grip_before;
  }
  return Tensor({horizon, kActionDim}, std::move(rows));
}

}  // namespace

std::string_view kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::local_pick:
      return "local_pick";
    case TaskKind::global_place:
      return "global_place";
    case TaskKind::sequence:
      return "sequence";
  }
  return "unknown";
}

TaskKind parse_kind(std::string_view name) {
  for (TaskKind k : kAllKinds)
    if (kind_name(k) == name) return k;
  throw std::invalid_argument("unknown task kind '" + std::string(name) + "'");
}

double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

Point cell_center(std::size_t cell) {
  return {static_cast<double>(cell % kGrid) + 0.5, static_cast<double>(cell / kGrid) + 0.5};
}

std::optional<std::size_t> cell_of(Point p) {
  if (!(p.x >= 0.0 && p.x < kGrid && p.y >= 0.0 && p.y < kGrid)) return std::nullopt;
  return static_cast<std::size_t>(p.y) * kGrid + static_cast<std::size_t>(p.x);
}

// ---- scene ----------------------------------------------------------------

std::vector<float> GridScene::channels() const {
  std::vector<float> out(kCells * kChannels, 0.0f);
  for (const auto& o : objects) write_cell(out, o.cell, o);
  if (marker) out[*marker * kChannels + kMarker] = 1.0f;
  return out;
}

GridScene GridScene::from_channels(std::span<const float> channels, Point gripper) {
  if (channels.size() != kCells * kChannels) {
    throw std::invalid_argument("scene: expected " + std::to_string(kCells * kChannels) + " channel values, got " +
                                std::to_string(channels.size()));
  }
  GridScene scene;
  scene.gripper = gripper;
  for (std::size_t cell = 0; cell < kCells; ++cell) {
    const float* c = channels.data() + cell * kChannels;
    if (c[kMarker] == 1.0f) {
      if (scene.marker) throw std::invalid_argument("scene: more than one target marker");
      scene.marker = cell;
    } else if (c[kMarker] != 0.0f) {
      throw std::invalid_argument("scene: marker channel must be 0 or 1");
    }
    if (c[kOccupancy] == 0.0f) {
      for (std::size_t k = 1; k < kMarker; ++k)
        if (c[k] != 0.0f) throw std::invalid_argument("scene: empty cell carries object channels");
      continue;
    }
    if (c[kOccupancy] != 1.0f) throw std::invalid_argument("scene: occupancy must be 0 or 1");
    std::optional<std::size_t> cls;
    for (std::size_t k = 0; k < kClasses; ++k) {
      if (c[kClassBase + k] == 1.0f && !cls) {
        cls = k;
      } else if (c[kClassBase + k] != 0.0f) {
        throw std::invalid_argument("scene: class channels are not one-hot");
      }
    }
    if (!cls) throw std::invalid_argument("scene: occupied cell without a class");
    if (!(c[kHeight] >= 0.0f && c[kHeight] <= 1.0f)) throw std::invalid_argument("scene: height outside [0, 1]");
    scene.objects.push_back({cell, *cls, static_cast<double>(c[kHeight])});
  }
  return scene;
}

const SceneObject* GridScene::object_at(std::size_t cell) const {
  for (const auto& o : objects)
    if (o.cell == cell) return &o;
  return nullptr;
}

std::optional<std::size_t> relational_target(const GridScene& scene, std::size_t anchor_class) {
  Point centroid;
  std::size_t anchors = 0;
  for (const auto& o : scene.objects) {
    if (o.cls != anchor_class) continue;
    const Point c = cell_center(o.cell);
    centroid.x += c.x;
    centroid.y += c.y;
    ++anchors;
  }
  if (anchors != 3) return std::nullopt;
  centroid.x /= 3.0;
  centroid.y /= 3.0;
  std::optional<std::size_t> best;
  double best_d = std::numeric_limits<double>::infinity();
  bool tied = false;
  for (std::size_t cell = 0; cell < kCells; ++cell) {
    if (scene.object_at(cell) != nullptr) continue;
    const double d = distance(cell_center(cell), centroid);
    if (d < best_d - 1e-9) {
      best = cell;
      best_d = d;
      tied = false;
    } else if (std::abs(d - best_d) <= 1e-9) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return best;
}

TaskSpec derive_task(TaskKind kind, const std::array<std::uint16_t, kInstructionLen>& tokens, const GridScene& scene) {
  auto fail = [&](const std::string& why) {
    return std::invalid_argument(std::string(kind_name(kind)) + ": unsatisfiable task: " + why);
  };
  for (auto t : tokens)
    if (t >= kVocab) throw fail("token id " + std::to_string(t) + " outside vocabulary");
  if (tokens[0] != static_cast<std::uint16_t>(kind)) throw fail("instruction does not start with the kind token");

  TaskSpec task;
  task.kind = kind;
  task.tokens = tokens;
  switch (kind) {
    case TaskKind::local_pick: {
      const auto cls = token_class(tokens[1]);
      if (!cls) throw fail("missing target class token");
      if (!scene.marker) throw fail("no target marker");
      const SceneObject* o = scene.object_at(*scene.marker);
      if (o == nullptr || o->cls != *cls) throw fail("marked cell does not hold an object of the named class");
      task.target_cell = *scene.marker;
      break;
    }
    case TaskKind::global_place: {
      const auto anchor = token_class(tokens[1]);
      const auto carried = token_class(tokens[2]);
      if (!anchor || !carried || *anchor == *carried) throw fail("need distinct anchor and carried class tokens");
      const SceneObject* c = unique_of_class(scene, *carried);
      if (c == nullptr) throw fail("carried class must name exactly one object");
      const auto target = relational_target(scene, *anchor);
      if (!target) throw fail("no unique empty cell nearest the anchor centroid");
      task.target_cell = *target;
      task.carried_cell = c->cell;
      break;
    }
    case TaskKind::sequence: {
      if (!scene.marker) throw fail("no bin marker");
      if (scene.object_at(*scene.marker) != nullptr) throw fail("bin cell is occupied");
      task.target_cell = *scene.marker;
      std::vector<std::size_t> seen;
      for (std::size_t i = 1; i < kInstructionLen; ++i) {
        if (tokens[i] == kPadToken) {
          for (std::size_t j = i; j < kInstructionLen; ++j)
            if (tokens[j] != kPadToken) throw fail("class token after padding");
          break;
        }
        const auto cls = token_class(tokens[i]);
        if (!cls || std::find(seen.begin(), seen.end(), *cls) != seen.end()) throw fail("bad class order");
        seen.push_back(*cls);
        const SceneObject* o = unique_of_class(scene, *cls);
        if (o == nullptr) throw fail("each ordered class must name exactly one object");
        task.order.push_back(o->cell);
      }
      if (task.order.size() < 3) throw fail("sequence needs at least three objects");
      break;
    }
  }
  return task;
}

// ---- rendering ------------------------------------------------------------

namespace {

struct RenderBasis {
  std::vector<double> map;  // [kChannels, d_vlm]
  std::vector<double> pe;   // [kCells, d_vlm]
};

const RenderBasis& render_basis(std::size_t d_vlm) {
  static std::mutex mu;
  static std::map<std::size_t, RenderBasis> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(d_vlm);
  if (it != cache.end()) return it->second;
  RenderBasis b;
  std::mt19937_64 rng(kRenderSeed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(kChannels)));
  b.map.resize(kChannels * d_vlm);
  for (double& v : b.map) v = dist(rng);
  const Tensor pe = positional_encoding(kCells, d_vlm);
  b.pe.assign(pe.data().begin(), pe.data().end());
  return cache.emplace(d_vlm, std::move(b)).first->second;
}

}  // namespace

Tensor render_patches(std::span<const float> channels, std::size_t d_vlm) {
  if (channels.size() != kCells * kChannels) throw ShapeError("render_patches: wrong channel count");
  if (d_vlm == 0) throw std::invalid_argument("render_patches: width must be >= 1");
  const RenderBasis& basis = render_basis(d_vlm);
  std::vector<double> out(basis.pe);
  for (std::size_t cell = 0; cell < kCells; ++cell)
    for (std::size_t ch = 0; ch < kChannels; ++ch) {
      const double c = channels[cell * kChannels + ch];
      if (c == 0.0) continue;
      for (std::size_t j = 0; j < d_vlm; ++j) out[cell * d_vlm + j] += c * basis.map[ch * d_vlm + j];
    }
  return Tensor({kCells, d_vlm}, std::move(out));
}

// ---- world ----------------------------------------------------------------

World::World(const GridScene& scene, const TaskSpec& task, std::size_t horizon)
    : marker_(scene.marker), task_(task), horizon_(horizon), gripper_(scene.gripper) {
  if (horizon == 0) throw std::invalid_argument("world: horizon must be >= 1");
  for (const auto& o : scene.objects) bodies_.push_back({o, cell_center(o.cell), Status::on_grid});
}

std::optional<std::size_t> World::body_on_cell(std::size_t cell) const {
  for (std::size_t i = 0; i < bodies_.size(); ++i)
    if (bodies_[i].status == Status::on_grid && cell_of(bodies_[i].pos) == cell) return i;
  return std::nullopt;
}

void World::grasp() {
  if (held_) return;
  std::optional<std::size_t> best;
  double best_d = kGraspRadius;
  for (std::size_t i = 0; i < bodies_.size(); ++i) {
    if (bodies_[i].status != Status::on_grid) continue;
    const double d = distance(bodies_[i].pos, gripper_);
    if (d <= best_d && (!best || d < best_d)) {
      best = i;
      best_d = d;
    }
  }
  if (!best) return;
  held_ = best;
  bodies_[*best].status = Status::held;
}

void World::release() {
  if (!held_) return;
  const auto cell = cell_of(gripper_);
  Body& b = bodies_[*held_];
  if (task_.kind == TaskKind::sequence && cell == task_.target_cell) {
    b.status = Status::deposited;
    deposits_.push_back(b.info.cell);
  } else if (!body_on_cell(*cell)) {
    b.status = Status::on_grid;
  } else {
    return;  // blocked: the object stays in the gripper
  }
  b.pos = gripper_;
  held_.reset();
}

void World::step(std::span<const double> action) {
  if (action.size() != kActionDim) {
    throw ShapeError("world: action has " + std::to_string(action.size()) + " entries, expected " +
                     std::to_string(kActionDim));
  }
  auto unit = [](double v) { return std::isfinite(v) ? std::clamp(v, -1.0, 1.0) : 0.0; };
  const double reach = static_cast<double>(kGrid) / static_cast<double>(horizon_);
  const double edge = std::nextafter(static_cast<double>(kGrid), 0.0);
  gripper_.x = std::clamp(gripper_.x + unit(action[0]) * reach, 0.0, edge);
  gripper_.y = std::clamp(gripper_.y + unit(action[1]) * reach, 0.0, edge);
  z_ = std::clamp(z_ + unit(action[2]) / static_cast<double>(horizon_), 0.0, 1.0);
  const bool close = unit(action[3]) > 0.0;
  if (close && !closed_) grasp();
  if (!close && closed_) release();
  closed_ = close;
  if (held_) bodies_[*held_].pos = gripper_;
}

void World::apply(const Tensor& chunk) {
  if (chunk.shape() != Shape{horizon_, kActionDim}) {
    throw ShapeError("world: chunk " + shape_str(chunk.shape()) + " does not match [" + std::to_string(horizon_) +
                     ", " + std::to_string(kActionDim) + "]");
  }
  const auto d = chunk.data();
  for (std::size_t h = 0; h < horizon_; ++h) step(d.subspan(h * kActionDim, kActionDim));
}

std::vector<float> World::channels() const {
  std::vector<float> out(kCells * kChannels, 0.0f);
  for (const auto& b : bodies_)
    if (b.status == Status::on_grid) write_cell(out, *cell_of(b.pos), b.info);
  if (marker_) out[*marker_ * kChannels + kMarker] = 1.0f;
  return out;
}

std::array<double, kStateDim> World::state() const {
  const double half = static_cast<double>(kGrid) / 2.0;
  return {gripper_.x / half - 1.0, gripper_.y / half - 1.0, closed_ ? 1.0 : -1.0, held_ ? 1.0 : 0.0};
}

RolloutResult World::result() const {
  auto body_from = [&](std::size_t cell) -> const Body& {
    for (const auto& b : bodies_)
      if (b.info.cell == cell) return b;
    throw std::logic_error("world: task refers to a missing object");
  };
  RolloutResult r;
  const Point target = cell_center(task_.target_cell);
  switch (task_.kind) {
    case TaskKind::local_pick:
      r.distance = distance(gripper_, target);
      r.subgoals = held_ && bodies_[*held_].info.cell == task_.target_cell;
      break;
    case TaskKind::global_place: {
      const Body& c = body_from(task_.carried_cell);
      r.distance = distance(c.pos, target);
      r.subgoals = c.status == Status::on_grid && c.info.cell != *cell_of(c.pos);
      break;
    }
    case TaskKind::sequence:
      for (std::size_t cell : task_.order) r.distance = std::max(r.distance, distance(body_from(cell).pos, target));
      r.subgoals = deposits_ == task_.order;
      break;
  }
  r.success = r.distance < kSuccessRadius && r.subgoals;
  return r;
}

// ---- expert ---------------------------------------------------------------

std::vector<Tensor> expert_actions(const GridScene& scene, const TaskSpec& task, std::size_t horizon) {
  const TaskSpec checked = derive_task(task.kind, task.tokens, scene);
  if (!(checked == task)) throw std::invalid_argument("expert_actions: task parameters inconsistent with the scene");
  std::vector<Point> waypoints;
  switch (task.kind) {
    case TaskKind::local_pick:
      waypoints = {cell_center(task.target_cell)};
      break;
    case TaskKind::global_place:
      waypoints = {cell_center(task.carried_cell), cell_center(task.target_cell)};
      break;
    case TaskKind::sequence:
      for (std::size_t cell : task.order) {
        waypoints.push_back(cell_center(cell));
        waypoints.push_back(cell_center(task.target_cell));
      }
      break;
  }
  World world(scene, task, horizon);
  std::vector<Tensor> chunks;
  for (std::size_t i = 0; i < waypoints.size(); ++i) {
    const bool pick = i % 2 == 0;
    chunks.push_back(move_chunk(world.gripper(), waypoints[i], horizon, pick ? -1.0 : 1.0, pick ? 1.0 : -1.0));
    world.apply(chunks.back());
  }
  return chunks;
}

RolloutResult evaluate_rollout(const Episode& episode, std::span<const Tensor> chunks) {
  World world(episode);
  for (const auto& c : chunks) world.apply(c);
  return world.result();
}

// ---- generation -----------------------------------------------------------

namespace {

struct Draw {
  std::mt19937_64& rng;

  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

  std::vector<std::size_t> distinct_cells(std::size_t n, const std::vector<std::size_t>& taken) {
    std::vector<std::size_t> pool;
    for (std::size_t c = 0; c < kCells; ++c)
      if (std::find(taken.begin(), taken.end(), c) == taken.end()) pool.push_back(c);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(n);
    return pool;
  }
};

std::optional<GridScene> layout(TaskKind kind, Draw& d, std::array<std::uint16_t, kInstructionLen>& tokens) {
  GridScene scene;
  tokens.fill(static_cast<std::uint16_t>(kPadToken));
  tokens[0] = static_cast<std::uint16_t>(kind);
  std::vector<std::size_t> used;
  auto add = [&](std::size_t cell, std::size_t cls, double h) {
    scene.objects.push_back({cell, cls, to_f32(h)});
    used.push_back(cell);
  };
  std::vector<std::size_t> classes(kClasses);
  std::iota(classes.begin(), classes.end(), 0);
  std::shuffle(classes.begin(), classes.end(), d.rng);

  switch (kind) {
    case TaskKind::local_pick: {
      const std::size_t target = d.index(kCells);
      const std::size_t cls = classes[0];
      const double h = d.uniform(0.3, 0.9);
      add(target, cls, h);
      auto near = neighbours(target);
      std::shuffle(near.begin(), near.end(), d.rng);
      const std::size_t n_similar = std::min<std::size_t>(near.size(), 2 + d.index(2));
      for (std::size_t i = 0; i < n_similar; ++i) add(near[i], cls, h + d.uniform(-0.1, 0.1));
      const std::size_t n_other = d.index(3);
      for (std::size_t c : d.distinct_cells(n_other, used)) add(c, classes[1 + d.index(kClasses - 1)], d.uniform(0.3, 1.0));
      scene.marker = target;
      tokens[1] = static_cast<std::uint16_t>(class_token(cls));
      break;
    }
    case TaskKind::global_place: {
      const std::size_t anchor = classes[0], carried = classes[1];
      for (std::size_t c : d.distinct_cells(3, used)) add(c, anchor, d.uniform(0.3, 1.0));
      for (std::size_t c : d.distinct_cells(1, used)) add(c, carried, d.uniform(0.3, 1.0));
      const std::size_t n_other = d.index(3);
      for (std::size_t c : d.distinct_cells(n_other, used)) add(c, classes[2 + d.index(2)], d.uniform(0.3, 1.0));
      if (!relational_target(scene, anchor)) return std::nullopt;
      tokens[1] = static_cast<std::uint16_t>(class_token(anchor));
      tokens[2] = static_cast<std::uint16_t>(class_token(carried));
      break;
    }
    case TaskKind::sequence: {
      const std::size_t n = 3 + d.index(2);
      const auto cells = d.distinct_cells(n + 1, used);
      for (std::size_t i = 0; i < n; ++i) {
        add(cells[i], classes[i], d.uniform(0.3, 1.0));
        tokens[1 + i] = static_cast<std::uint16_t>(class_token(classes[i]));
      }
      scene.marker = cells[n];
      break;
    }
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  scene.gripper = {to_f32(d.uniform(0.5, 7.5)), to_f32(d.uniform(0.5, 7.5))};
  return scene;
}

}  // namespace

Episode generate_episode(TaskKind kind, std::mt19937_64& rng, std::size_t horizon, std::size_t d_vlm) {
  if (horizon == 0) throw std::invalid_argument("generate_episode: horizon must be >= 1");
  Draw draw{rng};
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::array<std::uint16_t, kInstructionLen> tokens{};
    auto scene = layout(kind, draw, tokens);
    if (!scene) continue;
    Episode ep;
    ep.scene = std::move(*scene);
    ep.task = derive_task(kind, tokens, ep.scene);
    ep.horizon = horizon;
    // The start must not already satisfy the task.
    World start(ep);
    if (start.result().distance < 1.0) continue;
    ep.expert = expert_actions(ep.scene, ep.task, horizon);
    if (!evaluate_rollout(ep, ep.expert).success) continue;
    ep.patches = render_patches(ep.scene.channels(), d_vlm);
    return ep;
  }
  throw std::runtime_error("generate_episode: no valid episode after " + std::to_string(kMaxAttempts) + " attempts");
}

std::vector<Episode> generate_episodes(TaskKind kind, std::size_t count, std::uint64_t seed, std::size_t horizon,
                                       std::size_t d_vlm) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(kind), static_cast<std::uint32_t>(i),
                      static_cast<std::uint32_t>(static_cast<std::uint64_t>(i) >> 32)};
    std::mt19937_64 rng(seq);
    out.push_back(generate_episode(kind, rng, horizon, d_vlm));
  }
  return out;
}

// ---- dataset --------------------------------------------------------------

std::vector<unsigned char> serialize_dataset(std::span<const Episode> episodes) {
  binio::Writer w;
  w.put_bytes(kDatasetMagic, 4);
  w.put<std::uint16_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(episodes.size()));
  for (const auto& ep : episodes) {
    binio::Writer rec;
    rec.put<float>(static_cast<float>(ep.scene.gripper.x));
    rec.put<float>(static_cast<float>(ep.scene.gripper.y));
    const auto ch = ep.scene.channels();
    rec.put_bytes(ch.data(), ch.size() * sizeof(float));
    rec.put<std::uint8_t>(static_cast<std::uint8_t>(ep.task.kind));
    rec.put<std::uint16_t>(static_cast<std::uint16_t>(kInstructionLen));
    for (auto t : ep.task.tokens) rec.put<std::uint16_t>(t);
    rec.put<std::uint16_t>(static_cast<std::uint16_t>(ep.horizon));
    rec.put<std::uint16_t>(static_cast<std::uint16_t>(kActionDim));
    rec.put<std::uint16_t>(static_cast<std::uint16_t>(ep.expert.size()));
    for (const auto& c : ep.expert)
      for (double v : c.data()) rec.put<float>(static_cast<float>(v));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.size()));
    w.put_bytes(rec.bytes().data(), rec.size());
  }
  return std::move(w.bytes());
}

std::vector<Episode> deserialize_dataset(std::span<const unsigned char> bytes, std::size_t d_vlm) {
  binio::Reader r(bytes.data(), bytes.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kDatasetMagic)) throw DatasetMagicError("dataset: bad magic (expected RTVD)");
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetVersion) {
    throw DatasetVersionError("dataset: version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kDatasetVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<Episode> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::vector<unsigned char> payload(len);
    r.get_bytes(payload.data(), len);
    binio::Reader rec(payload.data(), payload.size());
    const std::string where = "dataset record " + std::to_string(i) + ": ";
    Episode ep;
    Point gripper;
    gripper.x = rec.get<float>();
    gripper.y = rec.get<float>();
    std::vector<float> ch(kCells * kChannels);
    rec.get_bytes(ch.data(), ch.size() * sizeof(float));
    const auto kind = rec.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(TaskKind::sequence)) throw DatasetError(where + "unknown task kind");
    if (rec.get<std::uint16_t>() != kInstructionLen) throw DatasetError(where + "unexpected instruction length");
    std::array<std::uint16_t, kInstructionLen> tokens{};
    for (auto& t : tokens) t = rec.get<std::uint16_t>();
    ep.horizon = rec.get<std::uint16_t>();
    if (ep.horizon == 0 || rec.get<std::uint16_t>() != kActionDim) throw DatasetError(where + "bad chunk geometry");
    const auto chunks = rec.get<std::uint16_t>();
    for (std::uint16_t c = 0; c < chunks; ++c) {
      std::vector<double> v(ep.horizon * kActionDim);
      for (double& x : v) x = rec.get<float>();
      ep.expert.emplace_back(Shape{ep.horizon, kActionDim}, std::move(v));
    }
    if (rec.remaining() != 0) throw DatasetError(where + "record length does not match its contents");
    try {
      ep.scene = GridScene::from_channels(ch, gripper);
      ep.task = derive_task(static_cast<TaskKind>(kind), tokens, ep.scene);
    } catch (const std::invalid_argument& e) {
      throw DatasetError(where + e.what());
    }
    ep.patches = render_patches(ch, d_vlm);
    out.push_back(std::move(ep));
  }
  if (r.remaining() != 0) throw DatasetError("dataset: trailing bytes after the last record");
  return out;
}

void write_dataset(std::span<const Episode> episodes, const std::string& path) {
  binio::write_file(path, serialize_dataset(episodes));
}

std::vector<Episode> read_dataset(const std::string& path, std::size_t d_vlm) {
  return deserialize_dataset(binio::read_file(path), d_vlm);
}

}  // namespace retovla::env
