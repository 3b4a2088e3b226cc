#include "bevref/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "bevref/rng.hpp"

namespace bevref::scene {

namespace {

constexpr const char* kCategoryNames[] = {"car", "truck", "bus", "pedestrian", "bicycle", "barrier"};
constexpr const char* kAttributeNames[] = {"gray", "yellow", "red", "blue", "white", "black"};
constexpr const char* kRelationNames[] = {"left_of",  "right_of", "in_front_of", "behind",
                                          "next_to", "nearest",  "none"};
constexpr const char* kRoleNames[] = {"target", "contextual", "ambiguous", "background"};

constexpr const char* kRelationPhrases[] = {"left of", "right of",  "in front of",
                                            "behind",  "next to",   "nearest"};

// l, w, h ranges per category, meters.
struct SizeRange {
  double lmin, lmax, wmin, wmax, hmin, hmax;
};
constexpr SizeRange kSizes[] = {
    {4.0, 5.0, 1.7, 2.0, 1.4, 1.8},    // car
    {6.0, 9.0, 2.3, 2.8, 2.5, 3.5},    // truck
    {9.0, 12.0, 2.5, 3.0, 3.0, 3.5},   // bus
    {0.5, 0.8, 0.5, 0.8, 1.5, 1.9},    // pedestrian
    {1.5, 1.9, 0.5, 0.7, 1.0, 1.4},    // bicycle
    {2.0, 3.0, 0.3, 0.6, 0.9, 1.2},    // barrier
};

constexpr double kPi = std::numbers::pi;
constexpr double kSideMargin = 0.5;       // directional predicate slack, meters
constexpr double kNextToNear = 5.0;       // target placed at most this far for next_to
constexpr double kNextToFarRival = 7.0;   // rivals at least this far for next_to
constexpr double kNearestGap = 1.0;       // rival distance exceeds target's by this much
constexpr double kOverlapPad = 0.3;       // per-side inflation in the no-overlap check
constexpr double kSurfaceDensity = 0.6;   // points per square meter of box surface
constexpr int kMinSurfacePoints = 20;

}  // namespace

const char* to_string(Category c) { return kCategoryNames[static_cast<int>(c)]; }
const char* to_string(Attribute a) { return kAttributeNames[static_cast<int>(a)]; }
const char* to_string(Relation r) { return kRelationNames[static_cast<int>(r)]; }
const char* to_string(Role r) { return kRoleNames[static_cast<int>(r)]; }

namespace {

template <typename E, std::size_t N>
E enum_from_string(const std::string& s, const char* const (&names)[N], const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  throw parse_error(std::string("unknown ") + what + ": '" + s + "'");
}

}  // namespace

Category category_from_string(const std::string& s) {
  return enum_from_string<Category>(s, kCategoryNames, "category");
}
Attribute attribute_from_string(const std::string& s) {
  return enum_from_string<Attribute>(s, kAttributeNames, "attribute");
}
Relation relation_from_string(const std::string& s) {
  return enum_from_string<Relation>(s, kRelationNames, "relation");
}
Role role_from_string(const std::string& s) {
  return enum_from_string<Role>(s, kRoleNames, "role");
}

int Scenario::target_index() const {
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (objects[i].role == Role::target) return static_cast<int>(i);
  return -1;
}

int Scenario::contextual_index() const {
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (objects[i].role == Role::contextual) return static_cast<int>(i);
  return -1;
}

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  v.tokens = {"<pad>"};
  for (const char* n : kCategoryNames) v.tokens.push_back(n);
  for (const char* n : kAttributeNames) v.tokens.push_back(n);
  for (const char* w : {"left", "right", "of", "in", "front", "behind", "next", "to", "nearest",
                        "the", "that", "is", "find", "located"})
    v.tokens.push_back(w);
  return v;
}

int Vocabulary::index(const std::string& token) const {
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] == token) return static_cast<int>(i);
  return -1;
}

geo::Vec2 local_coords(const geo::Box3D& ctx, const geo::Box3D& obj) {
  const double dx = obj.cx - ctx.cx, dy = obj.cy - ctx.cy;
  const double c = std::cos(ctx.yaw), s = std::sin(ctx.yaw);
  return {c * dx + s * dy, -s * dx + c * dy};
}

bool relation_holds(Relation r, const geo::Box3D& obj, const geo::Box3D& ctx,
                    std::span<const geo::Box3D> rivals, double next_to_radius) {
  const geo::Vec2 lc = local_coords(ctx, obj);
  switch (r) {
    case Relation::left_of:
      return lc.x < 0.0 && std::fabs(lc.x) > std::fabs(lc.y);
    case Relation::right_of:
      return lc.x > 0.0 && std::fabs(lc.x) > std::fabs(lc.y);
    case Relation::in_front_of:
      return lc.y > 0.0 && std::fabs(lc.y) > std::fabs(lc.x);
    case Relation::behind:
      return lc.y < 0.0 && std::fabs(lc.y) > std::fabs(lc.x);
    case Relation::next_to:
      return geo::center_distance_bev(obj, ctx) < next_to_radius;
    case Relation::nearest: {
      const double d = geo::center_distance_bev(obj, ctx);
      for (const auto& rv : rivals)
        if (geo::center_distance_bev(rv, ctx) <= d) return false;
      return true;
    }
    case Relation::none:
      return false;
  }
  return false;
}

namespace {

struct PendingObject {
  geo::Box3D box;
  Category category;
  Attribute attribute;
  Role role;
};

geo::Box3D inflate(const geo::Box3D& b, double pad) {
  geo::Box3D out = b;
  out.l += 2.0 * pad;
  out.w += 2.0 * pad;
  return out;
}

bool overlaps_any(const geo::Box3D& b, const std::vector<PendingObject>& placed) {
  for (const auto& p : placed)
    if (geo::bev_intersection_area(inflate(b, kOverlapPad), inflate(p.box, kOverlapPad)) > 0.0)
      return true;
  return false;
}

bool footprint_in_range(const geo::Box3D& b, double extent) {
  for (const auto& c : geo::bev_corners(b))
    if (std::fabs(c.x) > extent - 0.5 || std::fabs(c.y) > extent - 0.5) return false;
  return true;
}

geo::Box3D sample_box(Rng& rng, Category cat, double cx, double cy, double ground_z) {
  const SizeRange& sr = kSizes[static_cast<int>(cat)];
  const double l = rng.uniform(sr.lmin, sr.lmax);
  const double w = rng.uniform(sr.wmin, sr.wmax);
  const double h = rng.uniform(sr.hmin, sr.hmax);
  const double yaw = rng.uniform(-kPi, kPi);
  return geo::make_box(cx, cy, ground_z + 0.5 * h, l, w, h, yaw);
}

// Directional relations with margin: the side coordinate clears kSideMargin
// and dominates the cross coordinate by kSideMargin.
bool holds_with_margin(Relation r, const geo::Box3D& obj, const geo::Box3D& ctx) {
  const geo::Vec2 lc = local_coords(ctx, obj);
  switch (r) {
    case Relation::left_of:
      return lc.x <= -kSideMargin && std::fabs(lc.x) >= std::fabs(lc.y) + kSideMargin;
    case Relation::right_of:
      return lc.x >= kSideMargin && std::fabs(lc.x) >= std::fabs(lc.y) + kSideMargin;
    case Relation::in_front_of:
      return lc.y >= kSideMargin && std::fabs(lc.y) >= std::fabs(lc.x) + kSideMargin;
    case Relation::behind:
      return lc.y <= -kSideMargin && std::fabs(lc.y) >= std::fabs(lc.x) + kSideMargin;
    case Relation::next_to:
      return geo::center_distance_bev(obj, ctx) <= kNextToNear;
    default:
      return true;
  }
}

// Comfortable failure for a rival: plain predicate false even under small
// perturbation of either center.
bool fails_with_margin(Relation r, const geo::Box3D& obj, const geo::Box3D& ctx,
                       double target_dist) {
  const geo::Vec2 lc = local_coords(ctx, obj);
  switch (r) {
    case Relation::left_of:
      return lc.x >= kSideMargin || std::fabs(lc.y) >= std::fabs(lc.x) + kSideMargin;
    case Relation::right_of:
      return lc.x <= -kSideMargin || std::fabs(lc.y) >= std::fabs(lc.x) + kSideMargin;
    case Relation::in_front_of:
      return lc.y <= -kSideMargin || std::fabs(lc.x) >= std::fabs(lc.y) + kSideMargin;
    case Relation::behind:
      return lc.y >= kSideMargin || std::fabs(lc.x) >= std::fabs(lc.y) + kSideMargin;
    case Relation::next_to:
      return geo::center_distance_bev(obj, ctx) >= kNextToFarRival;
    case Relation::nearest:
      return geo::center_distance_bev(obj, ctx) >= target_dist + kNearestGap;
    default:
      return true;
  }
}

int surface_point_count(const geo::Box3D& b) {
  const double area = 2.0 * (b.l * b.w + b.l * b.h + b.w * b.h);
  return std::max(kMinSurfacePoints, static_cast<int>(std::lround(area * kSurfaceDensity)));
}

void sample_surface(Rng& rng, const geo::Box3D& b, int n, std::vector<Point>& out) {
  const double areas[6] = {b.w * b.h, b.w * b.h, b.l * b.h, b.l * b.h, b.l * b.w, b.l * b.w};
  double total = 0.0;
  for (double a : areas) total += a;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform(0.0, total);
    int face = 0;
    while (face < 5 && u >= areas[face]) u -= areas[face], ++face;
    double lx, ly, lz;
    switch (face) {
      case 0: lx = 0.5 * b.l; ly = rng.uniform(-0.5 * b.w, 0.5 * b.w); lz = rng.uniform(-0.5 * b.h, 0.5 * b.h); break;
      case 1: lx = -0.5 * b.l; ly = rng.uniform(-0.5 * b.w, 0.5 * b.w); lz = rng.uniform(-0.5 * b.h, 0.5 * b.h); break;
      case 2: ly = 0.5 * b.w; lx = rng.uniform(-0.5 * b.l, 0.5 * b.l); lz = rng.uniform(-0.5 * b.h, 0.5 * b.h); break;
      case 3: ly = -0.5 * b.w; lx = rng.uniform(-0.5 * b.l, 0.5 * b.l); lz = rng.uniform(-0.5 * b.h, 0.5 * b.h); break;
      case 4: lz = 0.5 * b.h; lx = rng.uniform(-0.5 * b.l, 0.5 * b.l); ly = rng.uniform(-0.5 * b.w, 0.5 * b.w); break;
      default: lz = -0.5 * b.h; lx = rng.uniform(-0.5 * b.l, 0.5 * b.l); ly = rng.uniform(-0.5 * b.w, 0.5 * b.w); break;
    }
    // pull fractionally inside so containment tests are not borderline
    lx *= 0.995;
    ly *= 0.995;
    lz *= 0.995;
    Point p;
    p.x = b.cx + c * lx - s * ly;
    p.y = b.cy + s * lx + c * ly;
    p.z = b.cz + lz;
    p.intensity = rng.next_double();
    out.push_back(p);
  }
}

struct PairId {
  Category cat;
  Attribute attr;
  bool operator==(const PairId&) const = default;
};

bool build_ambiguous(Rng& rng, const GenParams& params, std::vector<PendingObject>& objects,
                     Relation& relation_out) {
  const double lim = params.extent - 8.0;
  const auto target_cat = static_cast<Category>(rng.next_below(kCategoryCount));
  const auto target_attr = static_cast<Attribute>(rng.next_below(kAttributeCount));
  int cc = static_cast<int>(rng.next_below(kCategoryCount - 1));
  if (cc >= static_cast<int>(target_cat)) ++cc;
  const auto ctx_cat = static_cast<Category>(cc);
  const auto ctx_attr = static_cast<Attribute>(rng.next_below(kAttributeCount));
  const auto relation = static_cast<Relation>(rng.next_below(kRelationCount));
  const int n_amb = 2 + static_cast<int>(rng.next_below(2));
  const int n_bg = static_cast<int>(rng.next_below(3));

  objects.clear();
  const geo::Box3D ctx_box =
      sample_box(rng, ctx_cat, rng.uniform(-lim, lim), rng.uniform(-lim, lim), params.ground_z);
  if (!footprint_in_range(ctx_box, params.extent)) return false;
  objects.push_back({ctx_box, ctx_cat, ctx_attr, Role::contextual});

  // Target placed in the contextual frame so the margin predicate holds by
  // construction; world-frame bounds still need checking.
  geo::Box3D target_box;
  bool placed = false;
  for (int t = 0; t < 40 && !placed; ++t) {
    double lx, ly;
    switch (relation) {
      case Relation::left_of:
      case Relation::right_of: {
        const double a = rng.uniform(1.5, 14.0);
        lx = relation == Relation::left_of ? -a : a;
        ly = rng.uniform(-(a - kSideMargin), a - kSideMargin);
        break;
      }
      case Relation::in_front_of:
      case Relation::behind: {
        const double a = rng.uniform(1.5, 14.0);
        ly = relation == Relation::in_front_of ? a : -a;
        lx = rng.uniform(-(a - kSideMargin), a - kSideMargin);
        break;
      }
      default: {  // next_to, nearest
        const double d = relation == Relation::next_to ? rng.uniform(2.5, kNextToNear)
                                                       : rng.uniform(2.5, 8.0);
        const double ang = rng.uniform(-kPi, kPi);
        lx = d * std::cos(ang);
        ly = d * std::sin(ang);
        break;
      }
    }
    const double c = std::cos(ctx_box.yaw), s = std::sin(ctx_box.yaw);
    const double wx = ctx_box.cx + c * lx - s * ly;
    const double wy = ctx_box.cy + s * lx + c * ly;
    if (std::fabs(wx) > lim || std::fabs(wy) > lim) continue;
    target_box = sample_box(rng, target_cat, wx, wy, params.ground_z);
    if (!footprint_in_range(target_box, params.extent)) continue;
    if (overlaps_any(target_box, objects)) continue;
    if (!holds_with_margin(relation, target_box, ctx_box)) continue;
    placed = true;
  }
  if (!placed) return false;
  objects.push_back({target_box, target_cat, target_attr, Role::target});
  const double target_dist = geo::center_distance_bev(target_box, ctx_box);

  for (int a = 0; a < n_amb; ++a) {
    bool ok = false;
    for (int t = 0; t < 60 && !ok; ++t) {
      const geo::Box3D b =
          sample_box(rng, target_cat, rng.uniform(-lim, lim), rng.uniform(-lim, lim), params.ground_z);
      if (!footprint_in_range(b, params.extent)) continue;
      if (overlaps_any(b, objects)) continue;
      if (!fails_with_margin(relation, b, ctx_box, target_dist)) continue;
      objects.push_back({b, target_cat, target_attr, Role::ambiguous});
      ok = true;
    }
    if (!ok) return false;
  }

  const PairId target_pair{target_cat, target_attr};
  const PairId ctx_pair{ctx_cat, ctx_attr};
  for (int g = 0; g < n_bg; ++g) {
    bool ok = false;
    for (int t = 0; t < 60 && !ok; ++t) {
      const auto cat = static_cast<Category>(rng.next_below(kCategoryCount));
      const auto attr = static_cast<Attribute>(rng.next_below(kAttributeCount));
      if (PairId{cat, attr} == target_pair || PairId{cat, attr} == ctx_pair) continue;
      const geo::Box3D b =
          sample_box(rng, cat, rng.uniform(-lim, lim), rng.uniform(-lim, lim), params.ground_z);
      if (!footprint_in_range(b, params.extent)) continue;
      if (overlaps_any(b, objects)) continue;
      objects.push_back({b, cat, attr, Role::background});
      ok = true;
    }
    if (!ok) return false;
  }

  // Construction gives margins; confirm the plain predicates agree before
  // committing (exactly one satisfier, and it is the target).
  std::vector<geo::Box3D> matching;
  std::vector<std::size_t> matching_idx;
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (PairId{objects[i].category, objects[i].attribute} == target_pair) {
      matching.push_back(objects[i].box);
      matching_idx.push_back(i);
    }
  int satisfiers = 0;
  bool target_ok = false;
  for (std::size_t m = 0; m < matching.size(); ++m) {
    std::vector<geo::Box3D> rivals;
    for (std::size_t o = 0; o < matching.size(); ++o)
      if (o != m) rivals.push_back(matching[o]);
    if (relation_holds(relation, matching[m], ctx_box, rivals, params.next_to_radius)) {
      ++satisfiers;
      target_ok = objects[matching_idx[m]].role == Role::target;
    }
  }
  if (satisfiers != 1 || !target_ok) return false;

  relation_out = relation;
  return true;
}

bool build_easy(Rng& rng, const GenParams& params, std::vector<PendingObject>& objects,
                Relation& relation_out) {
  const double lim = params.extent - 8.0;
  const auto target_cat = static_cast<Category>(rng.next_below(kCategoryCount));
  const auto target_attr = static_cast<Attribute>(rng.next_below(kAttributeCount));
  const int n_bg = 2 + static_cast<int>(rng.next_below(3));
  const PairId target_pair{target_cat, target_attr};

  objects.clear();
  const geo::Box3D target_box =
      sample_box(rng, target_cat, rng.uniform(-lim, lim), rng.uniform(-lim, lim), params.ground_z);
  if (!footprint_in_range(target_box, params.extent)) return false;
  objects.push_back({target_box, target_cat, target_attr, Role::target});

  for (int g = 0; g < n_bg; ++g) {
    bool ok = false;
    for (int t = 0; t < 60 && !ok; ++t) {
      const auto cat = static_cast<Category>(rng.next_below(kCategoryCount));
      const auto attr = static_cast<Attribute>(rng.next_below(kAttributeCount));
      if (PairId{cat, attr} == target_pair) continue;
      const geo::Box3D b =
          sample_box(rng, cat, rng.uniform(-lim, lim), rng.uniform(-lim, lim), params.ground_z);
      if (!footprint_in_range(b, params.extent)) continue;
      if (overlaps_any(b, objects)) continue;
      objects.push_back({b, cat, attr, Role::background});
      ok = true;
    }
    if (!ok) return false;
  }
  relation_out = Relation::none;
  return true;
}

Scenario assemble(Rng& rng, int index, Difficulty difficulty,
                  std::vector<PendingObject> objects, Relation relation,
                  const GenParams& params) {
  // Shuffle so the target's position in the object list carries no signal.
  for (std::size_t i = objects.size(); i > 1; --i)
    std::swap(objects[i - 1], objects[rng.next_below(i)]);

  Scenario s;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%05d", index);
  s.id = buf;
  s.relation = relation;
  for (const auto& o : objects) s.objects.push_back({o.box, o.category, o.attribute, o.role});

  std::size_t n_fg = 0;
  for (const auto& o : objects) {
    const int n = surface_point_count(o.box);
    sample_surface(rng, o.box, n, s.points);
    n_fg += static_cast<std::size_t>(n);
  }
  const std::size_t n_bg = 4 * n_fg + 64;  // keeps background at >= 80% of points
  for (std::size_t i = 0; i < n_bg; ++i) {
    Point p;
    p.x = rng.uniform(-params.extent, params.extent);
    p.y = rng.uniform(-params.extent, params.extent);
    p.z = params.ground_z + rng.uniform(-0.05, 0.05);
    p.intensity = rng.next_double();
    s.points.push_back(p);
  }

  const int templates =
      difficulty == Difficulty::ambiguous ? kRelationalTemplateCount : kSingleTemplateCount;
  s.description = render_description(s, static_cast<int>(rng.next_below(templates)));
  return s;
}

}  // namespace

std::vector<Scenario> generate(std::uint64_t seed, int n_scenarios, Difficulty difficulty,
                               const GenParams& params) {
  if (n_scenarios <= 0) throw generation_error("n_scenarios must be positive");
  std::vector<Scenario> out;
  out.reserve(static_cast<std::size_t>(n_scenarios));
  for (int i = 0; i < n_scenarios; ++i) {
    Rng rng(seed ^ static_cast<std::uint64_t>(i));
    std::vector<PendingObject> objects;
    Relation relation = Relation::none;
    bool built = false;
    for (int attempt = 0; attempt < params.max_attempts && !built; ++attempt)
      built = difficulty == Difficulty::ambiguous ? build_ambiguous(rng, params, objects, relation)
                                                  : build_easy(rng, params, objects, relation);
    if (!built)
      throw generation_error("scenario " + std::to_string(i) + ": no valid layout after " +
                             std::to_string(params.max_attempts) + " attempts");
    out.push_back(assemble(rng, i, difficulty, std::move(objects), relation, params));
  }
  return out;
}

std::string render_description(const Scenario& s, int template_id) {
  const int ti = s.target_index();
  if (ti < 0) throw generation_error("render_description: no target object");
  const std::string ta = to_string(s.objects[static_cast<std::size_t>(ti)].attribute);
  const std::string tc = to_string(s.objects[static_cast<std::size_t>(ti)].category);
  const int ci = s.contextual_index();
  if (ci < 0) {
    switch (template_id) {
      case 0: return ta + " " + tc;
      case 1: return "the " + ta + " " + tc;
      case 2: return "find the " + ta + " " + tc;
      default: throw generation_error("render_description: bad single-object template id");
    }
  }
  const std::string ca = to_string(s.objects[static_cast<std::size_t>(ci)].attribute);
  const std::string cc = to_string(s.objects[static_cast<std::size_t>(ci)].category);
  const std::string rp = kRelationPhrases[static_cast<int>(s.relation)];
  switch (template_id) {
    case 0: return ta + " " + tc + " " + rp + " the " + ca + " " + cc;
    case 1: return "the " + ta + " " + tc + " " + rp + " the " + ca + " " + cc;
    case 2: return "the " + ta + " " + tc + " that is " + rp + " the " + ca + " " + cc;
    case 3: return "find the " + ta + " " + tc + " " + rp + " the " + ca + " " + cc;
    case 4: return ta + " " + tc + " located " + rp + " the " + ca + " " + cc;
    default: throw generation_error("render_description: bad template id");
  }
}

TokenBatch tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
  TokenBatch out;
  out.ids.assign(static_cast<std::size_t>(max_len), vocab.pad_index());
  out.valid.assign(static_cast<std::size_t>(max_len), 0);
  std::istringstream is(text);
  std::string word;
  std::size_t pos = 0;
  while (is >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    const int idx = vocab.index(word);
    if (idx < 0) throw vocab_error("unknown word: '" + word + "'");
    if (pos >= static_cast<std::size_t>(max_len))
      throw vocab_error("description exceeds " + std::to_string(max_len) + " tokens");
    out.ids[pos] = idx;
    out.valid[pos] = 1;
    ++pos;
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset serialization: one JSON object per line, %.17g doubles so that
// load(save(x)) reproduces every bit.

namespace {

constexpr const char* kFormatName = "bevref-scenes";
constexpr int kFormatVersion = 1;

void append_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_quoted(std::string& out, const std::string& s) {
  out += '"';
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  out += '"';
}

using nlohmann::json;

double num(const json& j) {
  if (!j.is_number()) throw parse_error("expected number");
  return j.get<double>();
}

const json& field(const json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end()) throw parse_error(std::string("missing field '") + name + "'");
  return *it;
}

}  // namespace

std::string scenario_to_json(const Scenario& s) {
  std::string out;
  out.reserve(4096 + s.points.size() * 72);
  out += "{\"id\":";
  append_quoted(out, s.id);
  out += ",\"description\":";
  append_quoted(out, s.description);
  out += ",\"relation\":\"";
  out += to_string(s.relation);
  out += "\",\"objects\":[";
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (i) out += ',';
    out += "{\"center\":[";
    append_double(out, o.box.cx);
    out += ',';
    append_double(out, o.box.cy);
    out += ',';
    append_double(out, o.box.cz);
    out += "],\"size\":[";
    append_double(out, o.box.l);
    out += ',';
    append_double(out, o.box.w);
    out += ',';
    append_double(out, o.box.h);
    out += "],\"yaw\":";
    append_double(out, o.box.yaw);
    out += ",\"category\":\"";
    out += to_string(o.category);
    out += "\",\"attribute\":\"";
    out += to_string(o.attribute);
    out += "\",\"role\":\"";
    out += to_string(o.role);
    out += "\",\"is_target\":";
    out += o.role == Role::target ? "true" : "false";
    out += '}';
  }
  out += "],\"points\":[";
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    if (i) out += ',';
    append_double(out, s.points[i].x);
    out += ',';
    append_double(out, s.points[i].y);
    out += ',';
    append_double(out, s.points[i].z);
    out += ',';
    append_double(out, s.points[i].intensity);
  }
  out += "]}";
  return out;
}

Scenario scenario_from_json(const std::string& line, int line_number) {
  try {
    const json j = json::parse(line);
    Scenario s;
    s.id = field(j, "id").get<std::string>();
    s.description = field(j, "description").get<std::string>();
    s.relation = relation_from_string(field(j, "relation").get<std::string>());
    for (const auto& jo : field(j, "objects")) {
      ObjectSpec o;
      const json& center = field(jo, "center");
      const json& size = field(jo, "size");
      if (center.size() != 3 || size.size() != 3) throw parse_error("center/size must have 3 entries");
      o.box.cx = num(center[0]);
      o.box.cy = num(center[1]);
      o.box.cz = num(center[2]);
      o.box.l = num(size[0]);
      o.box.w = num(size[1]);
      o.box.h = num(size[2]);
      o.box.yaw = num(field(jo, "yaw"));
      o.category = category_from_string(field(jo, "category").get<std::string>());
      o.attribute = attribute_from_string(field(jo, "attribute").get<std::string>());
      o.role = role_from_string(field(jo, "role").get<std::string>());
      const bool is_target = field(jo, "is_target").get<bool>();
      if (is_target != (o.role == Role::target))
        throw parse_error("is_target flag disagrees with role");
      s.objects.push_back(o);
    }
    const json& pts = field(j, "points");
    if (pts.size() % 4 != 0) throw parse_error("points array length must be a multiple of 4");
    for (std::size_t i = 0; i < pts.size(); i += 4)
      s.points.push_back({num(pts[i]), num(pts[i + 1]), num(pts[i + 2]), num(pts[i + 3])});
    int targets = 0;
    for (const auto& o : s.objects) targets += o.role == Role::target;
    if (targets != 1)
      throw parse_error("scenario must have exactly one target, found " + std::to_string(targets));
    return s;
  } catch (const json::exception& e) {
    throw parse_error("line " + std::to_string(line_number) + ": " + e.what());
  } catch (const parse_error& e) {
    throw parse_error("line " + std::to_string(line_number) + ": " + e.what());
  }
}

void save_dataset(const std::vector<Scenario>& scenarios, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open '" + path + "' for writing");
  out << "{\"format\":\"" << kFormatName << "\",\"version\":" << kFormatVersion << "}\n";
  for (const auto& s : scenarios) out << scenario_to_json(s) << '\n';
  if (!out) throw parse_error("write failed for '" + path + "'");
}

std::vector<Scenario> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw parse_error("line 1: missing format header");
  try {
    const json h = json::parse(line);
    if (field(h, "format").get<std::string>() != kFormatName)
      throw parse_error("unrecognized format name");
    if (field(h, "version").get<int>() != kFormatVersion)
      throw parse_error("unsupported format version");
  } catch (const json::exception& e) {
    throw parse_error(std::string("line 1: ") + e.what());
  } catch (const parse_error& e) {
    throw parse_error(std::string("line 1: ") + e.what());
  }
  std::vector<Scenario> out;
  int line_number = 1;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    out.push_back(scenario_from_json(line, line_number));
  }
  return out;
}

}  // namespace bevref::scene
