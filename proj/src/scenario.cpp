#include "iontrace/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "iontrace/constants.hpp"
#include "iontrace/rng.hpp"

namespace iontrace::scenario {

using json = nlohmann::json;
using beamline::Beamline;
using beamline::BeamlineContext;
using beamline::EnsembleSpec;
using beamline::PhasePolicy;

namespace {

std::string issues_message(const std::vector<SchemaIssue>& issues) {
  std::ostringstream out;
  out << "scenario schema error";
  for (const auto& i : issues) out << "\n  " << i.path << ": " << i.message;
  return out.str();
}

} // namespace

ScenarioError::ScenarioError(std::vector<SchemaIssue> issues)
    : std::runtime_error(issues_message(issues)), issues_(std::move(issues)) {}

namespace {

struct Validator {
  std::vector<SchemaIssue> issues;
  void err(const std::string& path, const std::string& message) {
    issues.push_back({path, message});
  }
};

/// Typed reader over one JSON object; records which keys are allowed so the
/// destructor-stage check can reject unknown keys with suffix suggestions.
class Obj {
public:
  Obj(Validator& v, const json& j, std::string path)
      : v_(v), j_(j), path_(std::move(path)) {
    if (!j_.is_object()) v_.err(path_, "expected an object");
  }

  bool has(const char* key) const {
    return j_.is_object() && j_.contains(key);
  }

  double num(const char* key, double def) {
    allowed_.insert(key);
    if (!has(key)) return def;
    if (!j_[key].is_number()) {
      v_.err(path_ + "." + key, "expected a number");
      return def;
    }
    return j_[key].get<double>();
  }

  long integer(const char* key, long def) {
    allowed_.insert(key);
    if (!has(key)) return def;
    if (!j_[key].is_number_integer()) {
      v_.err(path_ + "." + key, "expected an integer");
      return def;
    }
    return j_[key].get<long>();
  }

  std::uint64_t uinteger(const char* key, std::uint64_t def) {
    allowed_.insert(key);
    if (!has(key)) return def;
    if (!j_[key].is_number_unsigned() && !j_[key].is_number_integer()) {
      v_.err(path_ + "." + key, "expected an unsigned integer");
      return def;
    }
    return j_[key].get<std::uint64_t>();
  }

  bool boolean(const char* key, bool def) {
    allowed_.insert(key);
    if (!has(key)) return def;
    if (!j_[key].is_boolean()) {
      v_.err(path_ + "." + key, "expected a boolean");
      return def;
    }
    return j_[key].get<bool>();
  }

  std::string str(const char* key, const std::string& def) {
    allowed_.insert(key);
    if (!has(key)) return def;
    if (!j_[key].is_string()) {
      v_.err(path_ + "." + key, "expected a string");
      return def;
    }
    return j_[key].get<std::string>();
  }

  std::vector<double> num_array(const char* key) {
    allowed_.insert(key);
    std::vector<double> out;
    if (!has(key)) return out;
    if (!j_[key].is_array()) {
      v_.err(path_ + "." + key, "expected an array of numbers");
      return out;
    }
    for (const auto& e : j_[key]) {
      if (!e.is_number()) {
        v_.err(path_ + "." + key, "expected an array of numbers");
        return {};
      }
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::string> str_array(const char* key) {
    allowed_.insert(key);
    std::vector<std::string> out;
    if (!has(key)) return out;
    if (!j_[key].is_array()) {
      v_.err(path_ + "." + key, "expected an array of strings");
      return out;
    }
    for (const auto& e : j_[key]) {
      if (!e.is_string()) {
        v_.err(path_ + "." + key, "expected an array of strings");
        return {};
      }
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  const json* object(const char* key) {
    allowed_.insert(key);
    if (!has(key)) return nullptr;
    if (!j_[key].is_object()) {
      v_.err(path_ + "." + key, "expected an object");
      return nullptr;
    }
    return &j_[key];
  }

  const json* array(const char* key) {
    allowed_.insert(key);
    if (!has(key)) return nullptr;
    if (!j_[key].is_array()) {
      v_.err(path_ + "." + key, "expected an array");
      return nullptr;
    }
    return &j_[key];
  }

  /// Reject keys never registered by a getter. A bare key whose suffixed
  /// form exists gets a "did you mean" hint (unit suffixes are mandatory).
  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [key, value] : j_.items()) {
      if (allowed_.count(key)) continue;
      std::string msg = "unknown key";
      for (const auto& a : allowed_) {
        if (a.size() > key.size() && a.compare(0, key.size(), key) == 0 &&
            a[key.size()] == '_') {
          msg += "; did you mean \"" + a + "\" (unit suffix required)";
          break;
        }
      }
      v_.err(path_ + "." + key, msg);
    }
  }

private:
  Validator& v_;
  const json& j_;
  std::string path_;
  std::set<std::string> allowed_;
};

dynamics::IonSpecies parse_species(Validator& v, const std::string& name,
                                   const std::string& path) {
  if (name == "Ca+") return dynamics::IonSpecies::calcium();
  if (name == "N+") return dynamics::IonSpecies::nitrogen();
  v.err(path, "unknown species \"" + name + "\" (supported: Ca+, N+)");
  return dynamics::IonSpecies::calcium();
}

geometry::LensDesign parse_design(Validator& v, const std::string& name,
                                  const std::string& path) {
  if (name == "simple_symmetric") return geometry::LensDesign::SimpleSymmetric;
  if (name == "septier") return geometry::LensDesign::SeptierLike;
  if (name == "custom_asymmetric")
    return geometry::LensDesign::CustomAsymmetric;
  v.err(path, "unknown lens design \"" + name + "\"");
  return geometry::LensDesign::CustomAsymmetric;
}

Study::Kind parse_kind(Validator& v, const std::string& name,
                       const std::string& path) {
  if (name == "sweep") return Study::Kind::Sweep;
  if (name == "optimize") return Study::Kind::Optimize;
  if (name == "deflection_scan") return Study::Kind::DeflectionScan;
  if (name == "reflection") return Study::Kind::Reflection;
  if (name == "start_offset") return Study::Kind::StartOffset;
  if (name == "misalignment") return Study::Kind::Misalignment;
  if (name == "transmission") return Study::Kind::Transmission;
  v.err(path, "unknown study kind \"" + name + "\"");
  return Study::Kind::None;
}

const std::set<std::string> kMetrics = {"r68_at_plane", "focal_r68",
                                        "mean_speed", "speed_spread",
                                        "transmission"};

geometry::Aperture parse_aperture(Validator& v, const json& j,
                                  const std::string& path) {
  Obj o(v, j, path);
  geometry::Aperture ap;
  ap.diameter = o.num("diameter_m", 1e-3);
  ap.plane_z = o.num("plane_z_m", 0.0);
  ap.center_offset =
      Vec2(o.num("offset_x_m", 0.0), o.num("offset_y_m", 0.0));
  o.finish();
  return ap;
}

Scenario parse_validated(const json& root) {
  Validator v;
  Scenario s;

  Obj top(v, root, "$");
  for (const char* section : {"geometry", "voltages", "source", "run"})
    if (!top.has(section))
      v.err(std::string("$.") + section, "required section missing");

  if (const json* jg = top.object("geometry")) {
    Obj g(v, *jg, "geometry");
    if (const json* jt = g.object("trap")) {
      Obj t(v, *jt, "geometry.trap");
      auto& p = s.beam.trap.params;
      p.blade_thickness = t.num("blade_thickness_m", p.blade_thickness);
      p.blade_length = t.num("blade_length_m", p.blade_length);
      p.blade_separation = t.num("blade_separation_m", p.blade_separation);
      p.segment_width = t.num("segment_width_m", p.segment_width);
      p.segment_count =
          static_cast<int>(t.integer("segment_count", p.segment_count));
      p.deflection_electrode =
          t.boolean("deflection_electrode", p.deflection_electrode);
      p.deflection_width = t.num("deflection_width_m", p.deflection_width);
      p.rf_rail = t.boolean("rf_rail", p.rf_rail);
      p.segment_gap = t.num("segment_gap_m", p.segment_gap);
      p.rail_depth = t.num("rail_depth_m", p.rail_depth);
      p.gnd_rail_depth = t.num("gnd_rail_depth_m", p.gnd_rail_depth);
      p.rail_segment_gap = t.num("rail_segment_gap_m", p.rail_segment_gap);
      p.segment_depth = t.num("segment_depth_m", p.segment_depth);
      p.deflection_margin = t.num("deflection_margin_m", p.deflection_margin);
      s.beam.trap.mesh_size = t.num("mesh_size_m", s.beam.trap.mesh_size);
      t.finish();
    } else if (!g.has("trap")) {
      v.err("geometry.trap", "required section missing");
    }
    if (const json* jl = g.object("lens")) {
      s.beam.lens.emplace();
      Obj l(v, *jl, "geometry.lens");
      auto& p = s.beam.lens->params;
      p.design =
          parse_design(v, l.str("design", "custom_asymmetric"),
                       "geometry.lens.design");
      p.aperture_diameter = l.num("aperture_diameter_m", p.aperture_diameter);
      p.gap_12 = l.num("gap_12_m", p.gap_12);
      p.gap_23 = l.num("gap_23_m", p.gap_23);
      auto th = l.num_array("electrode_thicknesses_m");
      if (!th.empty()) {
        if (th.size() != 3)
          v.err("geometry.lens.electrode_thicknesses_m",
                "expected exactly 3 entries");
        else
          std::copy(th.begin(), th.end(), p.electrode_thicknesses.begin());
      }
      p.axial_position = l.num("axial_position_m", p.axial_position);
      p.outer_radius = l.num("outer_radius_m", p.outer_radius);
      s.beam.lens->mesh_size = l.num("mesh_size_m", s.beam.lens->mesh_size);
      s.beam.lens->axis_offset = Vec2(l.num("axis_offset_x_m", 0.0),
                                      l.num("axis_offset_y_m", 0.0));
      l.finish();
    }
    if (const json* jt = g.object("tube")) {
      s.beam.tube.emplace();
      Obj t(v, *jt, "geometry.tube");
      auto& p = s.beam.tube->params;
      p.radius = t.num("radius_m", p.radius);
      p.length = t.num("length_m", p.length);
      p.axial_position = t.num("axial_position_m", p.axial_position);
      s.beam.tube->mesh_size = t.num("mesh_size_m", s.beam.tube->mesh_size);
      t.finish();
    }
    if (const json* ja = g.array("apertures")) {
      int i = 0;
      for (const auto& e : *ja)
        s.beam.apertures.push_back(
            {parse_aperture(v, e, "geometry.apertures[" +
                                       std::to_string(i++) + "]")});
    }
    s.beam.target_plane_z = g.num("target_plane_z_m", s.beam.target_plane_z);
    g.finish();
  }

  if (const json* jv = top.object("voltages")) {
    Obj o(v, *jv, "voltages");
    auto& t = s.beam.trap;
    t.rf_amplitude = o.num("rf_amplitude_v", t.rf_amplitude);
    t.rf_frequency_hz = o.num("rf_frequency_hz", t.rf_frequency_hz);
    t.dc_endcap_voltage = o.num("dc_endcap_v", t.dc_endcap_voltage);
    auto dc = o.str_array("dc_segments");
    if (!dc.empty()) t.dc_segments = dc;
    t.extraction_voltage = o.num("extraction_v", t.extraction_voltage);
    auto ex = o.str_array("extraction_segments");
    if (!ex.empty()) t.extraction_segments = ex;
    t.extraction_rise_time = o.num("extraction_rise_s", t.extraction_rise_time);
    t.trigger_jitter_sigma =
        o.num("trigger_jitter_sigma_s", t.trigger_jitter_sigma);
    s.beam.deflection.u1 = o.num("deflection_u1_v", 0.0);
    s.beam.deflection.u2 = o.num("deflection_u2_v", 0.0);
    const double lens_v = o.num("lens_v", 65.0);
    if (s.beam.lens) s.beam.lens->voltage = lens_v;
    if (const json* js = o.object("lens_switch")) {
      Obj w(v, *js, "voltages.lens_switch");
      beamline::SwitchSchedule sched;
      sched.pre_voltage = w.num("pre_v", 0.0);
      sched.post_voltage = w.num("post_v", 0.0);
      sched.delay = w.num("delay_s", 0.0);
      sched.rise_time = w.num("rise_s", sched.rise_time);
      w.finish();
      if (s.beam.lens)
        s.beam.lens->schedule = sched;
      else
        v.err("voltages.lens_switch", "lens_switch without geometry.lens");
    }
    const double tube_v = o.num("tube_v", -10e3);
    const bool tube_off = o.boolean("tube_switch_off", true);
    if (s.beam.tube) {
      s.beam.tube->voltage = tube_v;
      s.beam.tube->switch_off_inside = tube_off;
    }
    o.finish();
  }

  if (const json* js = top.object("source")) {
    Obj o(v, *js, "source");
    s.beam.source.species =
        parse_species(v, o.str("species", "Ca+"), "source.species");
    s.beam.source.temperature_k =
        o.num("temperature_k", s.beam.source.temperature_k);
    s.beam.source.ion_count =
        static_cast<int>(o.integer("ion_count", s.beam.source.ion_count));
    s.beam.source.position_offset =
        Vec3(o.num("offset_x_m", 0.0), o.num("offset_y_m", 0.0),
             o.num("offset_z_m", 0.0));
    const std::string policy = o.str("phase_policy", "fixed");
    if (policy == "fixed")
      s.phase_policy = PhasePolicy::Fixed;
    else if (policy == "jittered")
      s.phase_policy = PhasePolicy::Jittered;
    else if (policy == "swept")
      s.phase_policy = PhasePolicy::Swept;
    else
      v.err("source.phase_policy",
            "expected one of fixed, jittered, swept");
    s.fixed_phase = o.num("fixed_phase_rad", 0.0);
    s.seed = o.uinteger("seed", 1);
    o.finish();
  }

  if (const json* jr = top.object("run")) {
    Obj o(v, *jr, "run");
    s.shots = static_cast<int>(o.integer("shots", s.shots));
    auto outputs = o.str_array("outputs");
    if (o.has("outputs")) {
      s.out_spots = s.out_tof = s.out_svg = false;
      for (const auto& name : outputs) {
        if (name == "spots")
          s.out_spots = true;
        else if (name == "tof")
          s.out_tof = true;
        else if (name == "svg")
          s.out_svg = true;
        else
          v.err("run.outputs",
                "unknown output \"" + name + "\" (spots, tof, svg)");
      }
    }
    o.finish();
  }

  if (const json* jy = top.object("study")) {
    Obj o(v, *jy, "study");
    Study& y = s.study;
    y.kind = parse_kind(v, o.str("kind", "sweep"), "study.kind");
    y.shots = static_cast<int>(o.integer("shots", y.shots));
    y.metric = o.str("metric", "");
    if (!y.metric.empty() && !kMetrics.count(y.metric))
      v.err("study.metric", "unknown metric \"" + y.metric + "\"");
    y.metric_plane_z = o.num("metric_plane_z_m", 0.0);
    auto window = o.num_array("focal_window_m");
    if (!window.empty()) {
      if (window.size() != 2)
        v.err("study.focal_window_m", "expected [z_lo, z_hi]");
      else {
        y.focal_window_lo = window[0];
        y.focal_window_hi = window[1];
      }
    }
    y.parameter = o.str("parameter", "");
    y.grid = o.num_array("grid");
    if (const json* jp = o.array("parameters")) {
      int i = 0;
      for (const auto& e : *jp) {
        Obj p(v, e, "study.parameters[" + std::to_string(i++) + "]");
        OptimizeParameter op;
        op.path = p.str("path", "");
        op.lower = p.num("lower", 0.0);
        op.upper = p.num("upper", 0.0);
        p.finish();
        y.parameters.push_back(op);
      }
    }
    y.budget = static_cast<int>(o.integer("budget", y.budget));
    y.final_shots = static_cast<int>(o.integer("final_shots", y.final_shots));
    y.u1_grid = o.num_array("u1_grid_v");
    y.u2_grid = o.num_array("u2_grid_v");
    if (const json* ja = o.object("aperture"))
      y.aperture = parse_aperture(v, *ja, "study.aperture");
    y.quantum_efficiency = o.num("quantum_efficiency", y.quantum_efficiency);
    y.mc_samples = static_cast<int>(o.integer("mc_samples", y.mc_samples));
    y.spot_scale = o.num("spot_scale", y.spot_scale);
    y.query_voltage = o.num("query_v", 0.0);
    y.lower_voltage = o.num("lower_v", 0.0);
    y.upper_voltage = o.num("upper_v", 0.0);
    y.offsets = o.num_array("offsets_m");
    o.finish();
  }
  top.finish();

  if (!v.issues.empty()) throw ScenarioError(std::move(v.issues));

  try {
    s.beam.validate();
  } catch (const ParameterError& e) {
    throw ScenarioError(std::vector<SchemaIssue>{{"$", e.what()}});
  }
  s.text = root.dump(2) + "\n";
  return s;
}

} // namespace

std::uint64_t Scenario::content_hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Scenario parse_scenario(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ScenarioError(std::vector<SchemaIssue>{
        {"$", std::string("not valid JSON: ") + e.what()}});
  }
  return parse_validated(root);
}

std::string serialize(const Scenario& s) { return s.text; }

namespace {

json base_preset() {
  json j;
  j["geometry"]["trap"] = json::object();
  j["geometry"]["target_plane_z_m"] = 0.247;
  j["voltages"]["rf_amplitude_v"] = 200.0;
  j["voltages"]["rf_frequency_hz"] = 12.155e6;
  j["voltages"]["dc_endcap_v"] = 35.0;
  j["voltages"]["extraction_v"] = 500.0;
  j["voltages"]["deflection_u1_v"] = 0.0;
  j["voltages"]["deflection_u2_v"] = 0.0;
  j["source"]["species"] = "Ca+";
  j["source"]["temperature_k"] = 2e-3;
  j["source"]["phase_policy"] = "fixed";
  j["source"]["seed"] = 1;
  j["run"]["shots"] = 300;
  return j;
}

void add_lens(json& j, double voltage) {
  j["geometry"]["lens"] = json::object();
  j["voltages"]["lens_v"] = voltage;
}

json preset_json(const std::string& name) {
  json j = base_preset();
  if (name == "fig1") return j;
  if (name == "fig2") {
    j["run"]["shots"] = 60;
    j["study"]["kind"] = "start_offset";
    j["study"]["shots"] = 60;
    j["study"]["offsets_m"] = {0.0, 50e-6, 150e-6, 420e-6};
    return j;
  }
  if (name == "fig3") {
    j["run"]["shots"] = 60;
    j["study"]["kind"] = "sweep";
    j["study"]["shots"] = 60;
    j["study"]["parameter"] = "source.fixed_phase_rad";
    json grid = json::array();
    for (int i = 0; i < 12; ++i)
      grid.push_back(2.0 * constants::pi * i / 12.0);
    j["study"]["grid"] = grid;
    j["study"]["metric"] = "mean_speed";
    return j;
  }
  if (name == "fig4_table" || name == "fig6") {
    add_lens(j, 65.0);
    j["run"]["shots"] = 100;
    j["study"]["kind"] = "sweep";
    j["study"]["shots"] = 100;
    j["study"]["parameter"] = "voltages.lens_v";
    j["study"]["grid"] = name == "fig6" ? json::array({65.0, 50.0})
                                        : json::array({65.0});
    j["study"]["metric"] = "focal_r68";
    j["study"]["focal_window_m"] = {0.2469, 0.258};
    return j;
  }
  if (name == "fig7a") {
    add_lens(j, 65.0);
    j["run"]["shots"] = 100;
    j["study"]["kind"] = "sweep";
    j["study"]["shots"] = 100;
    j["study"]["parameter"] = "voltages.lens_v";
    j["study"]["grid"] = {25.0, 35.0, 45.0, 50.0, 55.0, 60.0, 65.0};
    j["study"]["metric"] = "r68_at_plane";
    j["study"]["metric_plane_z_m"] = 0.2473;
    return j;
  }
  if (name == "fig7b") {
    add_lens(j, 65.0);
    j["run"]["shots"] = 100;
    j["study"]["kind"] = "misalignment";
    j["study"]["shots"] = 100;
    j["study"]["offsets_m"] = {0.0, 5e-6, 10e-6, 20e-6};
    j["study"]["focal_window_m"] = {0.2469, 0.258};
    return j;
  }
  if (name == "fig8") {
    // Monochromatic case: a fixed-phase 2 mK ensemble has a relative speed
    // spread of ~1e-4, so the focal spot is spherical-aberration limited and
    // the switched schedule can act on it.
    add_lens(j, 65.0);
    j["run"]["shots"] = 50;
    j["study"]["kind"] = "optimize";
    j["study"]["shots"] = 50;
    j["study"]["metric"] = "focal_r68";
    j["study"]["focal_window_m"] = {0.2469, 0.258};
    j["study"]["parameters"] = json::array(
        {{{"path", "voltages.lens_switch.post_v"},
          {"lower", 40.0},
          {"upper", 80.0}},
         {{"path", "voltages.lens_switch.delay_s"},
          {"lower", 0.0},
          {"upper", 3e-7}}});
    j["study"]["budget"] = 40;
    j["voltages"]["lens_switch"] = {{"pre_v", 65.0},
                                    {"post_v", 65.0},
                                    {"delay_s", 0.0},
                                    {"rise_s", 5e-9}};
    return j;
  }
  if (name == "fig9") {
    add_lens(j, 115.0);
    j["source"]["temperature_k"] = 0.0;
    j["run"]["shots"] = 1;
    j["study"]["kind"] = "reflection";
    j["study"]["query_v"] = 115.0;
    j["study"]["lower_v"] = 90.0;
    j["study"]["upper_v"] = 140.0;
    return j;
  }
  if (name == "fig11a") {
    j["source"]["phase_policy"] = "jittered";
    j["voltages"]["trigger_jitter_sigma_s"] = 0.34e-9;
    return j;
  }
  if (name == "fig13b") {
    j["run"]["shots"] = 300;
    j["study"]["kind"] = "transmission";
    j["study"]["spot_scale"] = 2.2;
    j["study"]["aperture"] = {{"diameter_m", 300e-6}, {"plane_z_m", 0.247}};
    j["study"]["quantum_efficiency"] = 1.0;
    j["study"]["mc_samples"] = 100000;
    return j;
  }
  throw ParameterError("unknown preset \"" + name + "\"");
}

} // namespace

std::vector<std::string> preset_names() {
  return {"fig1",  "fig2",  "fig3",  "fig4_table", "fig6",   "fig7a",
          "fig7b", "fig8",  "fig9",  "fig11a",     "fig13b"};
}

std::string preset(const std::string& name) {
  return preset_json(name).dump(2) + "\n";
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Set one dotted parameter path in the scenario text and re-validate.
Scenario with_parameter(const Scenario& base, const std::string& path,
                        double value) {
  if (path.rfind("voltages.", 0) != 0 && path.rfind("source.", 0) != 0)
    throw ParameterError("study parameter \"" + path +
                         "\" must live under voltages or source");
  json root = json::parse(base.text);
  std::string ptr = "/" + path;
  std::replace(ptr.begin(), ptr.end(), '.', '/');
  root[json::json_pointer(ptr)] = value;
  return parse_validated(root);
}

struct MetricContext {
  const BeamlineContext* base_ctx;
  const Scenario* base;
  int workers = 1;
};

EnsembleSpec ensemble_spec(const Scenario& s, int shots, int workers) {
  EnsembleSpec spec;
  spec.n_shots = shots;
  spec.seed = s.seed;
  spec.policy = s.phase_policy;
  spec.fixed_phase = s.fixed_phase;
  spec.workers = workers;
  return spec;
}

optimize::MetricValue evaluate_metric(const MetricContext& mc,
                                      const Scenario& s, int shots) {
  const Study& y = s.study;
  const BeamlineContext ctx =
      mc.base_ctx->with([&](Beamline& b) { b = s.beam; });
  const auto records =
      beamline::run_ensemble(ctx, ensemble_spec(s, shots, mc.workers));
  try {
    if (y.metric == "mean_speed" || y.metric == "speed_spread") {
      const auto vs = diagnostics::velocity_stats(records);
      long hits = 0;
      for (const auto& r : records)
        for (const auto& ion : r.ions)
          if (ion.outcome == beamline::Outcome::Hit) ++hits;
      if (hits < 2) return {1e9, 0.0};
      if (y.metric == "mean_speed")
        return {vs.mean, vs.spread / std::sqrt(static_cast<double>(hits))};
      return {vs.spread,
              vs.spread / std::sqrt(2.0 * static_cast<double>(hits - 1))};
    }
    if (y.metric == "r68_at_plane") {
      const double z =
          y.metric_plane_z != 0.0 ? y.metric_plane_z : s.beam.target_plane_z;
      double r;
      long hits = 0;
      if (s.beam.lens && z != s.beam.target_plane_z) {
        r = beamline::r68_at_plane(records, z);
        for (const auto& rec : records)
          for (const auto& ion : rec.ions)
            if (ion.post_lens && ion.outcome == beamline::Outcome::Hit)
              ++hits;
      } else {
        const auto spot = diagnostics::spot_from_records(records, z);
        hits = static_cast<long>(spot.hits.size());
        r = diagnostics::r68(spot);
      }
      return {r, r / std::sqrt(0.68 * static_cast<double>(std::max(hits, 1L)))};
    }
    if (y.metric == "focal_r68") {
      const auto fp = beamline::find_focal_plane(records, y.focal_window_lo,
                                                 y.focal_window_hi);
      long hits = 0;
      for (const auto& rec : records)
        for (const auto& ion : rec.ions)
          if (ion.post_lens && ion.outcome == beamline::Outcome::Hit) ++hits;
      return {fp.r68,
              fp.r68 / std::sqrt(0.68 * static_cast<double>(std::max(hits, 1L)))};
    }
    if (y.metric == "transmission") {
      auto spot =
          diagnostics::spot_from_records(records, s.beam.target_plane_z);
      if (y.spot_scale != 1.0)
        spot = diagnostics::spot_scale(spot, y.spot_scale);
      const auto tr = diagnostics::transmission(
          spot, y.aperture, {y.quantum_efficiency}, y.mc_samples,
          RandomStream::derive(s.seed, "transmission", 0));
      return {tr.probability, 0.5 * (tr.wilson_high - tr.wilson_low)};
    }
  } catch (const ParameterError&) {
    // Degenerate ensemble (all ions lost or reflected): a large but finite
    // penalty keeps sweeps and the optimizer deterministic.
    return {1e9, 0.0};
  }
  throw ParameterError("study.metric is required for this study kind");
}

void append_outcomes(std::ostringstream& out,
                     const std::vector<beamline::ShotRecord>& records) {
  long hit = 0, reflected = 0, struck = 0, lost = 0;
  for (const auto& r : records)
    for (const auto& ion : r.ions) {
      switch (ion.outcome) {
        case beamline::Outcome::Hit: ++hit; break;
        case beamline::Outcome::Reflected: ++reflected; break;
        case beamline::Outcome::StruckElectrode: ++struck; break;
        case beamline::Outcome::Lost: ++lost; break;
      }
    }
  out << "outcome_hit = " << hit << "\n";
  out << "outcome_reflected = " << reflected << "\n";
  out << "outcome_struck_electrode = " << struck << "\n";
  out << "outcome_lost = " << lost << "\n";
}

void run_study(const MetricContext& mc, std::ostringstream& summary,
               const std::string& out_dir, std::vector<std::string>& files) {
  const Scenario& s = *mc.base;
  const Study& y = s.study;
  const std::string trace_path = out_dir + "/trace.csv";

  switch (y.kind) {
    case Study::Kind::None:
      return;
    case Study::Kind::Sweep: {
      if (y.parameter.empty())
        throw ParameterError("study.parameter is required for a sweep");
      const auto curve = optimize::sweep(
          [&](double value) {
            Scenario sv = with_parameter(s, y.parameter, value);
            sv.study = y;
            return evaluate_metric(mc, sv, y.shots);
          },
          y.grid);
      std::vector<optimize::Evaluation> trace;
      for (const auto& p : curve)
        trace.push_back({static_cast<int>(trace.size()),
                         VecX::Constant(1, p.value), p.metric, p.uncertainty});
      optimize::write_trace_csv(trace, {y.parameter}, trace_path);
      files.push_back(trace_path);
      for (const auto& p : curve)
        summary << "sweep " << y.parameter << " = " << fmt(p.value)
                << " -> " << y.metric << " = " << fmt(p.metric) << " +- "
                << fmt(p.uncertainty) << "\n";
      return;
    }
    case Study::Kind::Optimize: {
      if (y.parameters.empty())
        throw ParameterError("study.parameters is required for optimize");
      const int dim = static_cast<int>(y.parameters.size());
      optimize::MinimizeSpec spec;
      spec.lower.resize(dim);
      spec.upper.resize(dim);
      std::vector<std::string> names;
      for (int i = 0; i < dim; ++i) {
        spec.lower[i] = y.parameters[i].lower;
        spec.upper[i] = y.parameters[i].upper;
        names.push_back(y.parameters[i].path);
      }
      spec.budget = y.budget;
      const auto res = optimize::minimize(
          [&](const VecX& x) {
            Scenario sv = s;
            for (int i = 0; i < dim; ++i)
              sv = with_parameter(sv, y.parameters[i].path, x[i]);
            sv.study = y;
            return evaluate_metric(mc, sv, y.shots);
          },
          spec);
      optimize::write_trace_csv(res.trace, names, trace_path);
      files.push_back(trace_path);
      for (int i = 0; i < dim; ++i)
        summary << "optimize_best " << names[i] << " = " << fmt(res.best[i])
                << "\n";
      summary << "optimize_best_metric = " << fmt(res.metric) << "\n";
      summary << "optimize_budget_exhausted = "
              << (res.budget_exhausted ? "true" : "false") << "\n";
      {
        Scenario sv = s;
        for (int i = 0; i < dim; ++i)
          sv = with_parameter(sv, y.parameters[i].path, res.best[i]);
        sv.study = y;
        const auto final = evaluate_metric(mc, sv, y.final_shots);
        summary << "optimize_final_metric = " << fmt(final.metric) << " +- "
                << fmt(final.uncertainty) << " (" << y.final_shots
                << " shots)\n";
      }
      return;
    }
    case Study::Kind::DeflectionScan: {
      std::vector<optimize::Evaluation> trace;
      const auto map = optimize::scan2d(
          [&](double u1, double u2) {
            Scenario sv = with_parameter(s, "voltages.deflection_u1_v", u1);
            sv = with_parameter(sv, "voltages.deflection_u2_v", u2);
            sv.study = y;
            sv.study.metric = "transmission";
            const auto m = evaluate_metric(mc, sv, y.shots);
            VecX p(2);
            p << u1, u2;
            trace.push_back({static_cast<int>(trace.size()), p, m.metric,
                             m.uncertainty});
            return m.metric;
          },
          y.u1_grid, y.u2_grid);
      optimize::write_trace_csv(trace, {"u1_v", "u2_v"}, trace_path);
      files.push_back(trace_path);
      summary << "deflection_scan_points = " << trace.size() << "\n";
      (void)map;
      return;
    }
    case Study::Kind::Reflection: {
      const BeamlineContext ctx =
          mc.base_ctx->with([&](Beamline& b) { b = s.beam; });
      const auto res = beamline::classify_reflection(
          ctx, y.query_voltage, y.lower_voltage, y.upper_voltage, s.seed);
      std::vector<optimize::Evaluation> trace;
      for (const auto& [voltage, reflected] : res.trace)
        trace.push_back({static_cast<int>(trace.size()),
                         VecX::Constant(1, voltage), reflected ? 1.0 : 0.0,
                         0.0});
      optimize::write_trace_csv(trace, {"lens_v"}, trace_path);
      files.push_back(trace_path);
      summary << "reflection_passes_at_query = "
              << (res.passes_at_query ? "true" : "false") << "\n";
      summary << "reflection_threshold_v = " << fmt(res.threshold_voltage)
              << "\n";
      return;
    }
    case Study::Kind::StartOffset: {
      const BeamlineContext ctx =
          mc.base_ctx->with([&](Beamline& b) { b = s.beam; });
      const auto stats = beamline::start_position_study(
          ctx, y.offsets, ensemble_spec(s, y.shots, mc.workers));
      std::vector<optimize::Evaluation> trace;
      for (const auto& st : stats) {
        trace.push_back({static_cast<int>(trace.size()),
                         VecX::Constant(1, st.offset), st.speed_spread, 0.0});
        summary << "start_offset_m = " << fmt(st.offset)
                << " -> mean_speed_mps = " << fmt(st.mean_speed)
                << ", speed_spread_mps = " << fmt(st.speed_spread) << "\n";
      }
      optimize::write_trace_csv(trace, {"offset_m"}, trace_path);
      files.push_back(trace_path);
      return;
    }
    case Study::Kind::Misalignment: {
      const BeamlineContext ctx =
          mc.base_ctx->with([&](Beamline& b) { b = s.beam; });
      const auto res = beamline::misalignment_study(
          ctx, y.offsets, ensemble_spec(s, y.shots, mc.workers),
          y.focal_window_lo, y.focal_window_hi);
      std::vector<optimize::Evaluation> trace;
      for (const auto& [offset, fp] : res) {
        trace.push_back({static_cast<int>(trace.size()),
                         VecX::Constant(1, offset), fp.r68, 0.0});
        summary << "misalignment_m = " << fmt(offset) << " -> focal_z_m = "
                << fmt(fp.z) << ", focal_r68_m = " << fmt(fp.r68) << "\n";
      }
      optimize::write_trace_csv(trace, {"offset_m"}, trace_path);
      files.push_back(trace_path);
      return;
    }
    case Study::Kind::Transmission: {
      Scenario sv = s;
      sv.study.metric = "transmission";
      const auto m = evaluate_metric(mc, sv, y.shots);
      summary << "transmission = " << fmt(m.metric) << " +- "
              << fmt(m.uncertainty) << "\n";
      return;
    }
  }
}

} // namespace

RunReport solve_only(const Scenario& s, const RunOptions& opts) {
  const auto ctx = BeamlineContext::prepare(s.beam, opts.cache_dir);
  RunReport report;
  report.scenario_hash = s.content_hash();
  report.seed = opts.seed.value_or(s.seed);
  std::ostringstream out;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(report.scenario_hash));
  out << "scenario_hash = " << hash << "\n";
  out << "trap_panels = " << ctx.trap_basis().panel_count() << "\n";
  out << "trap_center_z_m = " << fmt(ctx.trap_center().z()) << "\n";
  out << "secular_x_hz = "
      << fmt(ctx.secular_frequencies().x() / (2.0 * constants::pi)) << "\n";
  out << "secular_y_hz = "
      << fmt(ctx.secular_frequencies().y() / (2.0 * constants::pi)) << "\n";
  out << "secular_z_hz = "
      << fmt(ctx.secular_frequencies().z() / (2.0 * constants::pi)) << "\n";
  report.summary = out.str();
  return report;
}

RunReport run(const Scenario& s_in, const RunOptions& opts) {
  Scenario s = s_in;
  if (opts.seed) s.seed = *opts.seed;

  std::filesystem::create_directories(opts.out_dir);
  const auto ctx = BeamlineContext::prepare(s.beam, opts.cache_dir);

  RunReport report;
  report.scenario_hash = s_in.content_hash();
  report.seed = s.seed;

  std::ostringstream out;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(report.scenario_hash));
  out << "iontrace_version = 1.0.0\n";
  out << "eigen_version = " << EIGEN_WORLD_VERSION << "."
      << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION << "\n";
  out << "scenario_hash = " << hash << "\n";
  out << "seed = " << s.seed << "\n";
  out << "shots = " << s.shots << "\n";
  out << "workers = " << opts.workers << "\n";

  const auto records =
      beamline::run_ensemble(ctx, ensemble_spec(s, s.shots, opts.workers));
  append_outcomes(out, records);

  const auto spot =
      diagnostics::spot_from_records(records, s.beam.target_plane_z);
  const auto vs = diagnostics::velocity_stats(records);
  out << "mean_speed_mps = " << fmt(vs.mean) << "\n";
  out << "speed_spread_mps = " << fmt(vs.spread) << "\n";
  if (spot.hits.size() >= 3) {
    const double r = diagnostics::r68(spot);
    out << "r68_m = " << fmt(r) << "\n";
    out << "divergence_rad = "
        << fmt(diagnostics::divergence(spot, s.beam.target_plane_z)) << "\n";
  }
  const auto tof = diagnostics::tof_histogram(records, 10e-9);
  out << "tof_mean_s = " << fmt(tof.mean) << "\n";
  out << "tof_sigma_s = " << fmt(tof.sigma) << "\n";
  for (std::size_t i = 0; i < tof.ion_mean.size(); ++i)
    out << "tof_ion" << i << "_mean_s = " << fmt(tof.ion_mean[i]) << "\n";

  if (s.out_spots) {
    const std::string path = opts.out_dir + "/spots.csv";
    diagnostics::write_spot_csv(spot, records, path);
    report.files.push_back(path);
  }
  if (s.out_tof) {
    const std::string path = opts.out_dir + "/tof.csv";
    diagnostics::write_tof_csv(tof, path);
    report.files.push_back(path);
  }
  if (s.out_svg) {
    const std::string path = opts.out_dir + "/spot.svg";
    diagnostics::write_spot_svg(spot, path);
    report.files.push_back(path);
  }

  MetricContext mc{&ctx, &s, opts.workers};
  run_study(mc, out, opts.out_dir, report.files);

  const std::string summary_path = opts.out_dir + "/summary.txt";
  report.files.push_back(summary_path);
  out << "files =";
  for (const auto& f : report.files)
    out << ' ' << std::filesystem::path(f).filename().string();
  out << "\n";
  report.summary = out.str();
  std::ofstream(summary_path) << report.summary;
  return report;
}

} // namespace iontrace::scenario
