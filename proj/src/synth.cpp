#include "aligntree/synth.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "aligntree/error.hpp"
#include "aligntree/seed.hpp"
#include "json.hpp"

namespace aligntree {

using json = nlohmann::json;

namespace {

constexpr std::uint64_t kStructureTag = 0x5eed'd1ec'7104ULL;

std::vector<double> random_unit(std::mt19937_64& rng, std::uint32_t d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(d);
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (auto& x : v) {
      x = normal(rng);
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

void add_scaled(float* out, const std::vector<double>& v, double scale) {
  for (std::size_t k = 0; k < v.size(); ++k) out[k] = static_cast<float>(out[k] + scale * v[k]);
}

}  // namespace

std::string_view to_string(SynthMode mode) noexcept {
  switch (mode) {
    case SynthMode::Linear: return "linear";
    case SynthMode::Shell: return "shell";
    case SynthMode::Mixed: return "mixed";
  }
  return "?";
}

SynthMode synth_mode_from_string(std::string_view name) {
  if (name == "linear") return SynthMode::Linear;
  if (name == "shell") return SynthMode::Shell;
  if (name == "mixed") return SynthMode::Mixed;
  fail(ErrorCode::SpecError, "unknown synth mode '" + std::string(name) + "'");
}

void SynthSpec::validate() const {
  if (d_model == 0) fail(ErrorCode::SpecError, "d_model must be >= 1");
  if (n_layers == 0) fail(ErrorCode::SpecError, "n_layers must be >= 1");
  if (positions.size() == 0) fail(ErrorCode::SpecError, "position set is empty");
  if (n_per_class == 0) fail(ErrorCode::SpecError, "n_per_class must be >= 1");
  if (!(separation > 0) || !std::isfinite(separation)) fail(ErrorCode::SpecError, "separation must be positive");
  if (!(noise >= 0) || !std::isfinite(noise)) fail(ErrorCode::SpecError, "noise must be non-negative");
  if (mode != SynthMode::Linear && positions.size() < 2)
    fail(ErrorCode::SpecError, "shell signal needs a position other than the linear one");
}

SynthTruth planted_truth(const SynthSpec& spec) {
  spec.validate();
  SynthTruth t;
  const std::uint32_t layer = std::max(1u, spec.n_layers / 2);
  const std::int32_t linear_pos = spec.positions.index_of(-1) ? -1 : spec.positions[spec.positions.size() - 1];
  std::mt19937_64 rng(derive_seed(spec.seed, kStructureTag));
  t.direction = random_unit(rng, spec.d_model);
  t.center = random_unit(rng, spec.d_model);
  for (auto& c : t.center) c *= spec.separation;
  if (spec.mode != SynthMode::Shell) t.linear_at = SvmId{linear_pos, layer};
  if (spec.mode != SynthMode::Linear) {
    std::int32_t shell_pos = spec.positions[0];
    if (shell_pos == linear_pos) shell_pos = spec.positions[1];
    t.shell_at = SvmId{shell_pos, layer};
  }
  return t;
}

ActivationDataset generate(const SynthSpec& spec, Role role, std::uint64_t id_offset) {
  const auto truth = planted_truth(spec);
  ActivationDataset ds;
  ds.shape = {spec.d_model, spec.n_layers, spec.positions};
  ds.role = role;
  const auto d = spec.d_model;
  const auto elements = ds.shape.element_count();
  const double s = spec.separation;

  auto offset_of = [&](const SvmId& id) {
    return ds.shape.offset(*ds.shape.positions.index_of(id.position), id.layer - 1);
  };

  ds.records.resize(2 * spec.n_per_class);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    auto& r = ds.records[i];
    r.prompt_id = id_offset + i;
    r.label = i % 2 == 0 ? 1 : 0;
    // Mixed mode: harmful records at odd pair index skip the linear shift.
    const bool shell_only = spec.mode == SynthMode::Mixed && (i / 2) % 2 == 1;

    std::mt19937_64 rng(derive_seed(spec.seed, r.prompt_id));
    r.n_tokens = std::uniform_int_distribution<std::uint32_t>(8, 64)(rng);
    r.activations.assign(elements, 0.0f);
    if (spec.noise > 0) {
      std::normal_distribution<double> normal(0.0, spec.noise);
      for (auto& x : r.activations) x = static_cast<float>(normal(rng));
    }

    if (truth.linear_at) {
      const bool shifted_up = r.label == 1 && !shell_only;
      add_scaled(r.activations.data() + offset_of(*truth.linear_at), truth.direction, shifted_up ? s / 2 : -s / 2);
    }
    if (truth.shell_at) {
      const auto w = random_unit(rng, d);
      double radius;
      if (r.label == 1) {
        radius = s;
      } else {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        radius = 0.5 * s * std::pow(u, 1.0 / d);
      }
      float* out = r.activations.data() + offset_of(*truth.shell_at);
      add_scaled(out, truth.center, 1.0);
      add_scaled(out, w, radius);
    }
  }
  return ds;
}

std::map<Role, ActivationDataset> generate_splits(const SynthSpec& spec, const std::map<Role, std::size_t>& sizes) {
  std::map<Role, ActivationDataset> out;
  std::uint64_t offset = 0;
  for (auto role : {Role::DirectionSvmTrain, Role::DirectionSvmVal, Role::ForestTrain, Role::ForestVal, Role::Test}) {
    SynthSpec s = spec;
    if (auto it = sizes.find(role); it != sizes.end()) s.n_per_class = it->second;
    out.emplace(role, generate(s, role, offset));
    offset += 2 * s.n_per_class;
  }
  return out;
}

SynthPlan synth_plan_from_json_text(const std::string& text) {
  SynthPlan plan;
  auto& s = plan.spec;
  try {
    const auto j = json::parse(text);
    if (!j.is_object()) fail(ErrorCode::SpecError, "spec must be a JSON object");
    if (j.contains("mode")) s.mode = synth_mode_from_string(j.at("mode").get<std::string>());
    s.d_model = j.value("d_model", s.d_model);
    s.n_layers = j.value("n_layers", s.n_layers);
    if (j.contains("positions")) s.positions = TokenPositionSet(j.at("positions").get<std::vector<std::int32_t>>());
    s.n_per_class = j.value("n_per_class", s.n_per_class);
    s.separation = j.value("separation", s.separation);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
    if (j.contains("roles"))
      for (const auto& [name, n] : j.at("roles").items()) plan.sizes[role_from_string(name)] = n.get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorCode::SpecError, std::string("spec: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::SpecError) throw;
    fail(ErrorCode::SpecError, e.what());
  }
  for (const auto& [role, n] : plan.sizes)
    if (n == 0) fail(ErrorCode::SpecError, "role " + std::string(to_string(role)) + " has zero records per class");
  s.validate();
  return plan;
}

SynthPlan load_synth_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return synth_plan_from_json_text(ss.str());
}

}  // namespace aligntree
