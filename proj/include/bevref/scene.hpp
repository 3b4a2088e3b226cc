#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevref/geometry.hpp"

// Synthetic grounding scenarios: a point cloud, a closed-world object list,
// and a one-sentence description that picks out exactly one object. Role
// annotations beyond the target exist only for test oracles; training and
// inference never read them.

namespace bevref::scene {

struct generation_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct vocab_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Category { car, truck, bus, pedestrian, bicycle, barrier };
enum class Attribute { gray, yellow, red, blue, white, black };
enum class Relation { left_of, right_of, in_front_of, behind, next_to, nearest, none };
enum class Role { target, contextual, ambiguous, background };

inline constexpr int kCategoryCount = 6;
inline constexpr int kAttributeCount = 6;
inline constexpr int kRelationCount = 6;  // excludes none
inline constexpr int kRelationalTemplateCount = 5;
inline constexpr int kSingleTemplateCount = 3;

const char* to_string(Category c);
const char* to_string(Attribute a);
const char* to_string(Relation r);  // serialized name, e.g. "left_of"
const char* to_string(Role r);
Category category_from_string(const std::string& s);
Attribute attribute_from_string(const std::string& s);
Relation relation_from_string(const std::string& s);
Role role_from_string(const std::string& s);

struct ObjectSpec {
  geo::Box3D box;
  Category category = Category::car;
  Attribute attribute = Attribute::gray;
  Role role = Role::background;
  bool operator==(const ObjectSpec&) const = default;
};

struct Point {
  double x = 0.0, y = 0.0, z = 0.0, intensity = 0.0;
  bool operator==(const Point&) const = default;
};

struct Scenario {
  std::string id;
  std::vector<ObjectSpec> objects;
  std::vector<Point> points;
  std::string description;
  Relation relation = Relation::none;

  int target_index() const;      // -1 if absent
  int contextual_index() const;  // -1 if absent
  bool operator==(const Scenario&) const = default;
};

struct Vocabulary {
  std::vector<std::string> tokens;  // tokens[0] is the pad token

  static Vocabulary standard();
  int size() const { return static_cast<int>(tokens.size()); }
  int pad_index() const { return 0; }
  int index(const std::string& token) const;  // -1 if unknown
};

struct TokenBatch {
  std::vector<int> ids;             // length max_len, pad-filled
  std::vector<std::uint8_t> valid;  // 1 for real tokens
};

struct GenParams {
  double extent = 32.0;    // scene spans [-extent, extent] in x and y
  double ground_z = -1.8;  // objects rest on this plane
  int max_attempts = 1000;
  int max_tokens = 12;
  double next_to_radius = 6.0;  // predicate threshold, shared with relation_holds
};

enum class Difficulty { easy, ambiguous };

// Local BEV coordinates of obj's center in ctx's yaw frame.
geo::Vec2 local_coords(const geo::Box3D& ctx, const geo::Box3D& obj);

// Whether obj satisfies relation r against contextual box ctx. rivals are the
// other candidates sharing the target's category and attribute; only nearest
// consults them (strictly smallest center distance wins).
bool relation_holds(Relation r, const geo::Box3D& obj, const geo::Box3D& ctx,
                    std::span<const geo::Box3D> rivals, double next_to_radius = 6.0);

std::vector<Scenario> generate(std::uint64_t seed, int n_scenarios, Difficulty difficulty,
                               const GenParams& params = {});

// template_id < kRelationalTemplateCount for scenarios with a contextual
// object, < kSingleTemplateCount otherwise.
std::string render_description(const Scenario& s, int template_id);

TokenBatch tokenize(const std::string& text, const Vocabulary& vocab, int max_len = 12);

std::string scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const std::string& line, int line_number);

void save_dataset(const std::vector<Scenario>& scenarios, const std::string& path);
std::vector<Scenario> load_dataset(const std::string& path);

}  // namespace bevref::scene
