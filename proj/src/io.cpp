#include "rskelly/io.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

namespace rskelly::io {

namespace fs = std::filesystem;

// ============================== formatting =================================

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return std::string(buf);
}

namespace {

void dump_rec(const Json& j, std::string& out, int depth) {
  const std::string pad(2 * static_cast<std::size_t>(depth), ' ');
  const std::string pad1(2 * static_cast<std::size_t>(depth) + 2, ' ');
  switch (j.type()) {
    case Json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out += "{\n";
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out += ",\n";
        first = false;
        out += pad1 + Json(it.key()).dump() + ": ";
        dump_rec(it.value(), out, depth + 1);
      }
      out += "\n" + pad + "}";
      return;
    }
    case Json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      // Flat numeric arrays stay on one line; nested structures get one
      // element per line.
      bool flat = true;
      for (const auto& el : j)
        if (el.is_structured()) flat = false;
      if (flat) {
        out += "[";
        bool first = true;
        for (const auto& el : j) {
          if (!first) out += ", ";
          first = false;
          dump_rec(el, out, depth);
        }
        out += "]";
        return;
      }
      out += "[\n";
      bool first = true;
      for (const auto& el : j) {
        if (!first) out += ",\n";
        first = false;
        out += pad1;
        dump_rec(el, out, depth + 1);
      }
      out += "\n" + pad + "]";
      return;
    }
    case Json::value_t::number_float: {
      const double v = j.get<double>();
      out += std::isfinite(v) ? format_double(v) : std::string("null");
      return;
    }
    case Json::value_t::number_integer:
      out += std::to_string(j.get<long long>());
      return;
    case Json::value_t::number_unsigned:
      out += std::to_string(j.get<unsigned long long>());
      return;
    case Json::value_t::boolean:
      out += j.get<bool>() ? "true" : "false";
      return;
    case Json::value_t::string:
      out += j.dump();
      return;
    default:
      out += "null";
      return;
  }
}

}  // namespace

std::string dump_json(const Json& j) {
  std::string out;
  dump_rec(j, out, 0);
  out += "\n";
  return out;
}

Json vector_json(const Vec<double>& v) {
  Json arr = Json::array();
  for (index_t i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Json matrix_json(const Mat<double>& M) {
  Json rows = Json::array();
  for (index_t i = 0; i < M.rows(); ++i) {
    Json row = Json::array();
    for (index_t j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    rows.push_back(row);
  }
  return rows;
}

// ================================ parsing ==================================

namespace {

const Json& require_key(const Json& j, const std::string& key,
                        const std::string& ctx) {
  const auto it = j.find(key);
  if (it == j.end())
    throw SchemaError("missing config key '" + ctx + "'");
  return *it;
}

double get_number(const Json& j, const std::string& ctx) {
  if (!j.is_number())
    throw SchemaError("config key '" + ctx + "' must be a number");
  return j.get<double>();
}

long long get_integer(const Json& j, const std::string& ctx) {
  if (!j.is_number_integer())
    throw SchemaError("config key '" + ctx + "' must be an integer");
  return j.get<long long>();
}

bool get_bool(const Json& j, const std::string& ctx) {
  if (!j.is_boolean())
    throw SchemaError("config key '" + ctx + "' must be a boolean");
  return j.get<bool>();
}

std::string get_string(const Json& j, const std::string& ctx) {
  if (!j.is_string())
    throw SchemaError("config key '" + ctx + "' must be a string");
  return j.get<std::string>();
}

Vec<double> get_vector(const Json& j, const std::string& ctx) {
  if (!j.is_array())
    throw SchemaError("config key '" + ctx + "' must be an array of numbers");
  Vec<double> v(static_cast<index_t>(j.size()));
  index_t i = 0;
  for (const auto& el : j) {
    if (!el.is_number())
      throw SchemaError("config key '" + ctx + "' must be an array of numbers");
    v(i++) = el.get<double>();
  }
  return v;
}

Mat<double> get_matrix(const Json& j, const std::string& ctx) {
  if (!j.is_array() || j.empty())
    throw SchemaError("config key '" + ctx +
                      "' must be a non-empty array of rows");
  const index_t rows = static_cast<index_t>(j.size());
  index_t cols = -1;
  Mat<double> M;
  index_t r = 0;
  for (const auto& rowj : j) {
    if (!rowj.is_array() || rowj.empty())
      throw SchemaError("config key '" + ctx +
                        "' rows must be non-empty arrays of numbers");
    if (cols < 0) {
      cols = static_cast<index_t>(rowj.size());
      M.resize(rows, cols);
    } else if (static_cast<index_t>(rowj.size()) != cols) {
      throw SchemaError("config key '" + ctx + "' rows have unequal lengths");
    }
    index_t c = 0;
    for (const auto& el : rowj) {
      if (!el.is_number())
        throw SchemaError("config key '" + ctx +
                          "' rows must be non-empty arrays of numbers");
      M(r, c++) = el.get<double>();
    }
    ++r;
  }
  return M;
}

void parse_train_block(const Json& j, TrainBlock& tb) {
  if (j.contains("problem")) {
    tb.problem = get_string(j.at("problem"), "train.problem");
    if (tb.problem != "game" && tb.problem != "kelly")
      throw SchemaError("config key 'train.problem' must be 'game' or 'kelly'");
  }
  if (j.contains("algorithm")) {
    tb.algorithm = get_string(j.at("algorithm"), "train.algorithm");
    if (tb.algorithm != "npg" && tb.algorithm != "actor_critic")
      throw SchemaError(
          "config key 'train.algorithm' must be 'npg' or 'actor_critic'");
  }
  TrainConfig& c = tb.cfg;
  if (j.contains("episodes")) {
    const long long v = get_integer(j.at("episodes"), "train.episodes");
    if (v < 1) throw SchemaError("config key 'train.episodes' must be >= 1");
    c.episodes = static_cast<std::size_t>(v);
  }
  if (j.contains("batch")) {
    const long long v = get_integer(j.at("batch"), "train.batch");
    if (v < 2) throw SchemaError("config key 'train.batch' must be >= 2");
    c.batch = static_cast<std::size_t>(v);
  }
  if (j.contains("step0")) c.step0 = get_number(j.at("step0"), "train.step0");
  if (j.contains("schedule")) {
    const std::string s = get_string(j.at("schedule"), "train.schedule");
    if (s == "constant")
      c.schedule = StepSchedule::constant;
    else if (s == "inverse")
      c.schedule = StepSchedule::inverse;
    else if (s == "inverse_sqrt")
      c.schedule = StepSchedule::inverse_sqrt;
    else
      throw SchemaError(
          "config key 'train.schedule' must be one of constant, inverse, "
          "inverse_sqrt");
  }
  if (j.contains("estimator")) {
    const std::string s = get_string(j.at("estimator"), "train.estimator");
    if (s == "score_function")
      c.estimator = GradientEstimator::score_function;
    else if (s == "finite_difference")
      c.estimator = GradientEstimator::finite_difference;
    else if (s == "exact")
      c.estimator = GradientEstimator::exact;
    else
      throw SchemaError(
          "config key 'train.estimator' must be one of score_function, "
          "finite_difference, exact");
  }
  if (j.contains("seed"))
    c.seed = static_cast<std::uint64_t>(
        get_integer(j.at("seed"), "train.seed"));
  if (j.contains("tolerance"))
    c.tolerance = get_number(j.at("tolerance"), "train.tolerance");
  if (j.contains("patience"))
    c.patience = static_cast<int>(get_integer(j.at("patience"), "train.patience"));
  if (j.contains("x0_spread"))
    c.x0_spread = get_number(j.at("x0_spread"), "train.x0_spread");
  if (j.contains("freeze_eta"))
    c.freeze_eta = get_bool(j.at("freeze_eta"), "train.freeze_eta");
  if (j.contains("alternating"))
    c.alternating = get_bool(j.at("alternating"), "train.alternating");
  if (j.contains("divergence_threshold"))
    c.divergence_threshold =
        get_number(j.at("divergence_threshold"), "train.divergence_threshold");
  if (j.contains("fd_step"))
    c.fd_step = get_number(j.at("fd_step"), "train.fd_step");
  if (j.contains("precond_ridge"))
    c.precond_ridge = get_number(j.at("precond_ridge"), "train.precond_ridge");
  if (j.contains("critic_ridge"))
    c.critic_ridge = get_number(j.at("critic_ridge"), "train.critic_ridge");
}

}  // namespace

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open config file: " + path);
  Json root;
  try {
    root = Json::parse(in);
  } catch (const std::exception& e) {
    throw SchemaError("config is not valid JSON: " + std::string(e.what()));
  }
  if (!root.is_object()) throw SchemaError("config root must be an object");

  RunConfig cfg;
  if (root.contains("mode")) {
    cfg.mode = get_string(root.at("mode"), "mode");
    static const char* kModes[] = {"solve",     "check", "simulate", "evaluate",
                                   "train",     "decompose", "oracle"};
    bool known = false;
    for (const char* m : kModes) known = known || cfg.mode == m;
    if (!known) throw SchemaError("unknown mode: " + cfg.mode);
  }

  // Top-level scalars.
  cfg.params.theta = get_number(require_key(root, "theta", "theta"), "theta");
  cfg.params.dt = get_number(require_key(root, "dt", "dt"), "dt");
  const long long K = get_integer(require_key(root, "K", "K"), "K");
  if (K < 1) throw SchemaError("config key 'K' must be >= 1");
  cfg.params.K = static_cast<index_t>(K);

  // Model block; dimensions are inferred from the array shapes.
  const Json& model = require_key(root, "model", "model");
  if (!model.is_object()) throw SchemaError("config key 'model' must be an object");
  cfg.params.a = get_vector(require_key(model, "a", "model.a"), "model.a");
  cfg.params.A = get_matrix(require_key(model, "A", "model.A"), "model.A");
  cfg.params.Sigma =
      get_matrix(require_key(model, "Sigma", "model.Sigma"), "model.Sigma");
  cfg.params.b = get_vector(require_key(model, "b", "model.b"), "model.b");
  cfg.params.Bmat = get_matrix(require_key(model, "B", "model.B"), "model.B");
  cfg.params.Lambda =
      get_matrix(require_key(model, "Lambda", "model.Lambda"), "model.Lambda");
  cfg.params.c = get_number(require_key(model, "c", "model.c"), "model.c");
  cfg.params.Cvec = get_vector(require_key(model, "C", "model.C"), "model.C");
  cfg.params.Xi = get_vector(require_key(model, "Xi", "model.Xi"), "model.Xi");
  cfg.params.m = cfg.params.a.size();
  cfg.params.n = cfg.params.b.size();
  cfg.params.d = cfg.params.Xi.size();

  const ValidationReport vr = validate_params(cfg.params);
  if (!vr.ok) {
    std::string msg = "invalid parameters:";
    for (const auto& e : vr.errors) msg += " " + e + ";";
    throw SchemaError(msg);
  }

  cfg.X0 = get_vector(require_key(root, "X0", "X0"), "X0");
  if (cfg.X0.size() != cfg.params.n)
    throw SchemaError("config key 'X0' must have length n");

  // Exploration schedule: constant matrix or one matrix per step.
  const Json& ex = require_key(root, "exploration", "exploration");
  if (!ex.is_object())
    throw SchemaError("config key 'exploration' must be an object");
  const auto check_psi = [&](const Mat<double>& psi, const std::string& ctx) {
    if (psi.rows() != cfg.params.m || psi.cols() != cfg.params.m)
      throw SchemaError("config key '" + ctx + "' must be m x m");
  };
  if (ex.contains("psi")) {
    const Mat<double> psi = get_matrix(ex.at("psi"), "exploration.psi");
    check_psi(psi, "exploration.psi");
    cfg.sched = ExplorationSchedule<double>::constant(psi, cfg.params.K);
  } else if (ex.contains("psi_per_step")) {
    const Json& list = ex.at("psi_per_step");
    if (!list.is_array() ||
        list.size() != static_cast<std::size_t>(cfg.params.K))
      throw SchemaError(
          "config key 'exploration.psi_per_step' must be an array of K "
          "matrices");
    cfg.sched.psi.clear();
    for (const auto& el : list) {
      const Mat<double> psi = get_matrix(el, "exploration.psi_per_step");
      check_psi(psi, "exploration.psi_per_step");
      cfg.sched.psi.push_back(psi);
    }
  } else {
    throw SchemaError("exploration must provide 'psi' or 'psi_per_step'");
  }

  // Mode sub-blocks.
  if (root.contains("simulate")) {
    const Json& j = root.at("simulate");
    if (!j.is_object()) throw SchemaError("config key 'simulate' must be an object");
    if (j.contains("paths"))
      cfg.simulate.paths = static_cast<std::size_t>(
          std::max<long long>(0, get_integer(j.at("paths"), "simulate.paths")));
    if (j.contains("seed"))
      cfg.simulate.seed = static_cast<std::uint64_t>(
          get_integer(j.at("seed"), "simulate.seed"));
    if (j.contains("policy"))
      cfg.simulate.policy = get_string(j.at("policy"), "simulate.policy");
    if (j.contains("h"))
      cfg.simulate.h_const = get_vector(j.at("h"), "simulate.h");
  }
  if (root.contains("evaluate")) {
    const Json& j = root.at("evaluate");
    if (!j.is_object()) throw SchemaError("config key 'evaluate' must be an object");
    if (j.contains("objective"))
      cfg.evaluate.objective = get_string(j.at("objective"), "evaluate.objective");
    if (j.contains("paths"))
      cfg.evaluate.paths = static_cast<std::size_t>(
          std::max<long long>(0, get_integer(j.at("paths"), "evaluate.paths")));
    if (j.contains("seed"))
      cfg.evaluate.seed = static_cast<std::uint64_t>(
          get_integer(j.at("seed"), "evaluate.seed"));
    if (j.contains("policy"))
      cfg.evaluate.policy = get_string(j.at("policy"), "evaluate.policy");
    if (j.contains("h"))
      cfg.evaluate.h_const = get_vector(j.at("h"), "evaluate.h");
  }
  if (root.contains("train")) {
    const Json& j = root.at("train");
    if (!j.is_object()) throw SchemaError("config key 'train' must be an object");
    parse_train_block(j, cfg.train);
  }
  if (root.contains("decompose")) {
    const Json& j = root.at("decompose");
    if (!j.is_object()) throw SchemaError("config key 'decompose' must be an object");
    if (j.contains("k"))
      cfg.decompose.k = static_cast<index_t>(get_integer(j.at("k"), "decompose.k"));
    if (j.contains("variant")) {
      cfg.decompose.variant = get_string(j.at("variant"), "decompose.variant");
      const std::string& v = cfg.decompose.variant;
      if (v != "penalized" && v != "rotated_I" && v != "rotated_II" && v != "all")
        throw SchemaError(
            "config key 'decompose.variant' must be one of penalized, "
            "rotated_I, rotated_II, all");
    }
  }
  if (root.contains("oracle")) {
    const Json& j = root.at("oracle");
    if (!j.is_object()) throw SchemaError("config key 'oracle' must be an object");
    if (j.contains("kind")) {
      cfg.oracle.kind = get_string(j.at("kind"), "oracle.kind");
      if (cfg.oracle.kind != "dpp" && cfg.oracle.kind != "duality")
        throw SchemaError("config key 'oracle.kind' must be 'dpp' or 'duality'");
    }
    if (j.contains("k"))
      cfg.oracle.k = static_cast<index_t>(get_integer(j.at("k"), "oracle.k"));
    if (j.contains("points_per_dim"))
      cfg.oracle.options.points_per_dim = static_cast<int>(
          get_integer(j.at("points_per_dim"), "oracle.points_per_dim"));
    if (j.contains("stages"))
      cfg.oracle.options.stages =
          static_cast<int>(get_integer(j.at("stages"), "oracle.stages"));
    if (j.contains("halfwidth_h"))
      cfg.oracle.options.box_halfwidth_h =
          get_number(j.at("halfwidth_h"), "oracle.halfwidth_h");
    if (j.contains("halfwidth_gamma"))
      cfg.oracle.options.box_halfwidth_gamma =
          get_number(j.at("halfwidth_gamma"), "oracle.halfwidth_gamma");
    if (j.contains("halfwidth_eta"))
      cfg.oracle.options.box_halfwidth_eta =
          get_number(j.at("halfwidth_eta"), "oracle.halfwidth_eta");
    if (j.contains("shrink"))
      cfg.oracle.options.shrink = get_number(j.at("shrink"), "oracle.shrink");
    if (j.contains("psi_atoms")) {
      const Vec<double> v = get_vector(j.at("psi_atoms"), "oracle.psi_atoms");
      cfg.oracle.psi_atoms.assign(v.data(), v.data() + v.size());
    }
    if (j.contains("q_weights")) {
      const Vec<double> v = get_vector(j.at("q_weights"), "oracle.q_weights");
      cfg.oracle.q_weights.assign(v.data(), v.data() + v.size());
    }
    if (j.contains("grid_points_per_dim"))
      cfg.oracle.grid.points_per_dim = static_cast<int>(
          get_integer(j.at("grid_points_per_dim"), "oracle.grid_points_per_dim"));
    if (j.contains("grid_stages"))
      cfg.oracle.grid.stages =
          static_cast<int>(get_integer(j.at("grid_stages"), "oracle.grid_stages"));
    if (j.contains("grid_shrink"))
      cfg.oracle.grid.shrink =
          get_number(j.at("grid_shrink"), "oracle.grid_shrink");
  }
  if (root.contains("output")) {
    const Json& j = root.at("output");
    if (!j.is_object()) throw SchemaError("config key 'output' must be an object");
    if (j.contains("dir")) cfg.output.dir = get_string(j.at("dir"), "output.dir");
  }
  return cfg;
}

void apply_overrides(RunConfig& cfg, const std::optional<std::uint64_t>& seed,
                     const std::optional<std::size_t>& paths,
                     const std::optional<std::string>& out_dir) {
  if (seed) {
    cfg.simulate.seed = *seed;
    cfg.evaluate.seed = *seed;
    cfg.train.cfg.seed = *seed;
  }
  if (paths) {
    cfg.simulate.paths = *paths;
    cfg.evaluate.paths = *paths;
  }
  if (out_dir) cfg.output.dir = *out_dir;
}

// ============================== serializers ================================

Json to_json(const ConditionReport& rep) {
  const auto block = [](const ConditionBlock& b) {
    Json j;
    j["pass"] = b.pass;
    j["margin"] = b.margin;
    return j;
  };
  Json j;
  j["curvature_blockA"] = block(rep.curvature_blockA);
  j["curvature_blockB"] = block(rep.curvature_blockB);
  j["riskresist_C"] = block(rep.riskresist_C);
  j["riskresist_eta"] = block(rep.riskresist_eta);
  j["curvature_pass"] = rep.curvature_pass();
  j["riskresist_pass"] = rep.riskresist_pass();
  j["equivalence_flag"] = rep.equivalence_flag;
  return j;
}

Json to_json(const BoundReport& rep) {
  Json j;
  j["ok"] = rep.ok;
  j["theta_zero"] = rep.theta_zero;
  j["first_violation_step"] = static_cast<long long>(rep.first_violation_step);
  Json margins = Json::array();
  for (double m : rep.margins) margins.push_back(m);
  j["margins"] = margins;
  return j;
}

Json to_json(const McEstimate& est) {
  Json j;
  j["mean"] = est.mean;
  j["std_error"] = est.std_error;
  j["n_paths"] = static_cast<unsigned long long>(est.n_paths);
  j["log_space"] = est.log_space;
  return j;
}

Json to_json(const DualityReport<double>& rep) {
  Json j;
  j["free_energy"] = rep.free_energy;
  j["best_dual_value"] = rep.best_dual_value;
  j["gap"] = rep.gap;
  Json am = Json::array();
  for (double v : rep.argmax_tilt) am.push_back(v);
  j["argmax_tilt"] = am;
  Json rt = Json::array();
  for (double v : rep.reference_tilt) rt.push_back(v);
  j["reference_tilt"] = rt;
  j["max_atom_discrepancy"] = rep.max_atom_discrepancy;
  return j;
}

Json to_json(const OracleReport& rep) {
  Json j;
  j["value_minimax"] = rep.value_minimax;
  j["value_maximin"] = rep.value_maximin;
  j["value_analytic"] = rep.value_analytic;
  j["gap"] = rep.gap;
  j["minimax_maximin_gap"] = rep.minimax_maximin_gap;
  const auto arr = [](const std::vector<double>& v) {
    Json a = Json::array();
    for (double x : v) a.push_back(x);
    return a;
  };
  j["arg_h"] = arr(rep.arg_h);
  j["arg_gamma"] = arr(rep.arg_gamma);
  j["arg_eta"] = arr(rep.arg_eta);
  j["dist_h"] = rep.dist_h;
  j["dist_gamma"] = rep.dist_gamma;
  j["dist_eta"] = rep.dist_eta;
  j["final_cell_sizes"] = arr(rep.final_cell_sizes);
  j["stages_run"] = static_cast<long long>(rep.stages_run);
  return j;
}

Json to_json(const FksDecomposition<double>& dec) {
  Json j;
  switch (dec.variant) {
    case DecompositionVariant::rotated_I:
      j["variant"] = "rotated_I";
      break;
    case DecompositionVariant::rotated_II:
      j["variant"] = "rotated_II";
      break;
    case DecompositionVariant::penalized:
      j["variant"] = "penalized";
      break;
  }
  j["kelly_component"] = vector_json(dec.kelly_component);
  j["bench_component"] = vector_json(dec.bench_component);
  j["ihp_component"] = vector_json(dec.ihp_component);
  Json w = Json::array();
  for (double x : dec.mix_weights) w.push_back(x);
  j["mix_weights"] = w;
  j["recombination_residual"] = dec.recombination_residual;
  j["fallback_theta_zero"] = dec.fallback_theta_zero;
  j["recombined"] = vector_json(dec.recombined());
  return j;
}

Json to_json(const CriterionValues<double>& cv) {
  Json j;
  j["u0"] = cv.u0;
  j["inf_I"] = cv.inf_I;
  j["sup_J"] = cv.sup_J;
  j["overflowed"] = cv.overflowed;
  return j;
}

// ================================= CSV =====================================

namespace {

std::string csv_double(double x) { return format_double(x); }

}  // namespace

std::string value_csv(const MarketParams<double>& mp,
                      const QuadraticValue<double>& qv,
                      const ExplorationSchedule<double>& sched) {
  std::ostringstream os;
  os << "k";
  for (index_t i = 0; i < mp.n; ++i)
    for (index_t j = 0; j < mp.n; ++j) os << ",P_" << i << "_" << j;
  for (index_t i = 0; i < mp.n; ++i) os << ",p_" << i;
  os << ",r,curvature_blockA_margin,curvature_blockB_margin,"
        "riskresist_C_margin,riskresist_eta_margin,equivalence_flag\n";
  for (index_t k = 0; k <= mp.K; ++k) {
    const std::size_t kz = static_cast<std::size_t>(k);
    os << k;
    for (index_t i = 0; i < mp.n; ++i)
      for (index_t j = 0; j < mp.n; ++j)
        os << "," << csv_double(qv.P[kz](i, j));
    for (index_t i = 0; i < mp.n; ++i) os << "," << csv_double(qv.p[kz](i));
    os << "," << csv_double(qv.r[kz]);
    if (k < mp.K) {
      const ConditionReport rep =
          check_saddle_conditions<double>(mp, qv.P[kz + 1], sched.at(k));
      os << "," << csv_double(rep.curvature_blockA.margin) << ","
         << csv_double(rep.curvature_blockB.margin) << ","
         << csv_double(rep.riskresist_C.margin) << ","
         << csv_double(rep.riskresist_eta.margin) << ","
         << (rep.equivalence_flag ? 1 : 0);
    } else {
      os << ",,,,,";
    }
    os << "\n";
  }
  return os.str();
}

std::string paths_csv(const MarketParams<double>& mp,
                      const std::vector<PathRecord<double>>& records) {
  std::ostringstream os;
  os << "path_id,k";
  for (index_t i = 0; i < mp.n; ++i) os << ",X_" << i;
  for (index_t i = 0; i < mp.m; ++i) os << ",h_" << i;
  os << ",reward_term,logexcess_running\n";
  for (std::size_t pid = 0; pid < records.size(); ++pid) {
    const PathRecord<double>& rec = records[pid];
    double running = 0.0;
    for (index_t k = 0; k < mp.K; ++k) {
      const std::size_t kz = static_cast<std::size_t>(k);
      const double term = rec.raw_terms.drift[kz] + rec.raw_terms.shock[kz];
      running += term;
      os << pid << "," << k;
      for (index_t i = 0; i < mp.n; ++i)
        os << "," << csv_double(rec.X[kz](i));
      for (index_t i = 0; i < mp.m; ++i)
        os << "," << csv_double(rec.h_applied[kz](i));
      os << "," << csv_double(term) << "," << csv_double(running) << "\n";
    }
  }
  return os.str();
}

std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << "iteration,episodes,objective,objective_se,policy_grad_norm,"
        "tilt_grad_norm,step_size,dist_D,dist_d,dist_E,dist_e,norm_F,norm_f\n";
  for (const TraceRow& r : rows) {
    os << r.iteration << "," << r.episodes_used << ","
       << csv_double(r.objective) << "," << csv_double(r.objective_se) << ","
       << csv_double(r.policy_grad_norm) << "," << csv_double(r.tilt_grad_norm)
       << "," << csv_double(r.step_size) << "," << csv_double(r.dist_D) << ","
       << csv_double(r.dist_d) << "," << csv_double(r.dist_E) << ","
       << csv_double(r.dist_e) << "," << csv_double(r.norm_F) << ","
       << csv_double(r.norm_f) << "\n";
  }
  return os.str();
}

namespace {

Json affine_blocks_json(const std::vector<Mat<double>>& M,
                        const std::vector<Vec<double>>& v,
                        const char* mat_key, const char* vec_key) {
  Json j;
  Json mats = Json::array();
  for (const auto& Mk : M) mats.push_back(matrix_json(Mk));
  Json vecs = Json::array();
  for (const auto& vk : v) vecs.push_back(vector_json(vk));
  j[mat_key] = mats;
  j[vec_key] = vecs;
  return j;
}

}  // namespace

Json checkpoint_json(const GameTrainResult<double>& result,
                     const std::string& algorithm) {
  Json j;
  j["problem"] = "game";
  j["algorithm"] = algorithm;
  j["converged"] = result.converged;
  j["diverged"] = result.diverged;
  j["has_analytic"] = result.has_analytic;
  j["iterations_run"] = static_cast<unsigned long long>(result.iterations_run);
  Json pol;
  const Json dd =
      affine_blocks_json(result.policy.D, result.policy.dvec, "D", "d");
  const Json ee =
      affine_blocks_json(result.policy.E, result.policy.evec, "E", "e");
  const Json ff =
      affine_blocks_json(result.policy.F, result.policy.fvec, "F", "f");
  pol["D"] = dd["D"];
  pol["d"] = dd["d"];
  pol["E"] = ee["E"];
  pol["e"] = ee["e"];
  pol["F"] = ff["F"];
  pol["f"] = ff["f"];
  j["policy"] = pol;
  return j;
}

Json checkpoint_json(const KellyTrainResult<double>& result) {
  Json j;
  j["problem"] = "kelly";
  j["algorithm"] = "npg";
  j["converged"] = result.converged;
  j["diverged"] = result.diverged;
  j["iterations_run"] = static_cast<unsigned long long>(result.iterations_run);
  const Json dd =
      affine_blocks_json(result.policy.D, result.policy.dvec, "D", "d");
  Json pol;
  pol["D"] = dd["D"];
  pol["d"] = dd["d"];
  j["policy"] = pol;
  return j;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SchemaError("cannot write output file: " + path);
  out << content;
}

// ================================ driver ===================================

namespace {

struct BuiltPolicy {
  StatePolicy<double> policy;
  std::shared_ptr<SolveResult<double>> solved;  // set for "analytic"
};

BuiltPolicy build_policy(const MarketParams<double>& params,
                         const ExplorationSchedule<double>& sched,
                         const std::string& which, const Vec<double>& h_const) {
  BuiltPolicy bp;
  if (which == "analytic") {
    bp.solved = std::make_shared<SolveResult<double>>(solve(params, sched));
    const auto solved = bp.solved;
    const MarketParams<double> mp = params;
    bp.policy.h = [mp, solved](index_t k, const Vec<double>& X) {
      const std::size_t kz = static_cast<std::size_t>(k);
      return optimal_controls_primary<double>(mp, k, X, solved->value.P[kz + 1],
                                              solved->value.p[kz + 1])
          .hstar;
    };
    bp.policy.tag = PolicyTag::analytic_optimal;
  } else if (which == "kelly") {
    const MarketParams<double> mp = params;
    bp.policy.h = [mp](index_t, const Vec<double>& X) {
      return kelly_control<double>(mp, X);
    };
    bp.policy.tag = PolicyTag::analytic_optimal;
  } else if (which == "constant") {
    if (h_const.size() != params.m)
      throw SchemaError("constant policy requires 'h' of length m");
    const Vec<double> h = h_const;
    bp.policy.h = [h](index_t, const Vec<double>&) { return h; };
    bp.policy.tag = PolicyTag::constant;
  } else {
    throw SchemaError("unknown policy '" + which +
                      "' (expected analytic, kelly, or constant)");
  }
  return bp;
}

std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm_utc{};
  gmtime_r(&tt, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return std::string(buf);
}

void write_metadata(const RunConfig& cfg, double elapsed_seconds) {
  Json j;
  j["mode"] = cfg.mode;
  j["generated_utc"] = iso_utc_now();
  j["elapsed_seconds"] = elapsed_seconds;
  write_file((fs::path(cfg.output.dir) / "metadata.json").string(),
             dump_json(j));
}

void note(bool quiet, const std::string& line) {
  if (!quiet) std::cout << line << "\n";
}

int run_solve(const RunConfig& cfg, bool quiet) {
  const SolveResult<double> sr = solve(cfg.params, cfg.sched);
  const fs::path dir(cfg.output.dir);
  write_file((dir / "value.csv").string(),
             value_csv(cfg.params, sr.value, cfg.sched));

  Json cond;
  cond["bound"] = to_json(exploration_bound_ok(cfg.params, cfg.sched));
  Json steps = Json::array();
  for (index_t k = 0; k < cfg.params.K; ++k) {
    Json step = to_json(check_saddle_conditions<double>(
        cfg.params, sr.value.P[static_cast<std::size_t>(k) + 1],
        cfg.sched.at(k)));
    step["k"] = static_cast<long long>(k);
    steps.push_back(step);
  }
  cond["steps"] = steps;
  cond["all_pass"] = true;
  write_file((dir / "conditions.json").string(), dump_json(cond));

  const CriterionValues<double> cv =
      criterion_from_value<double>(sr.value, cfg.X0, cfg.params.theta);
  Json crit = to_json(cv);
  crit["X0"] = vector_json(cfg.X0);
  crit["theta"] = cfg.params.theta;
  write_file((dir / "criterion.json").string(), dump_json(crit));
  note(quiet, "solve: K=" + std::to_string(cfg.params.K) +
                  ", u0=" + format_double(cv.u0) +
                  ", sup_J=" + format_double(cv.sup_J));
  return 0;
}

int run_check(const RunConfig& cfg, bool quiet) {
  const BoundReport bound = exploration_bound_ok(cfg.params, cfg.sched);
  Mat<double> P = Mat<double>::Zero(cfg.params.n, cfg.params.n);
  Vec<double> p = Vec<double>::Zero(cfg.params.n);
  double r = 0.0;

  Json steps = Json::array();
  bool ok = true;
  index_t violated_step = -1;
  std::string violated_block;
  std::string failure_message;
  for (index_t k = cfg.params.K - 1; k >= 0; --k) {
    const ConditionReport rep =
        check_saddle_conditions<double>(cfg.params, P, cfg.sched.at(k));
    Json step = to_json(rep);
    step["k"] = static_cast<long long>(k);
    steps.push_back(step);
    if (!rep.curvature_pass()) {
      ok = false;
      violated_step = k;
      violated_block = rep.curvature_blockA.pass ? "curvature_blockB"
                                                   : "curvature_blockA";
      failure_message = "saddle condition failed (" + violated_block + ")";
      break;
    }
    Mat<double> Pn;
    Vec<double> pn;
    double rn = 0.0;
    step_back<double>(cfg.params, P, p, r, cfg.sched.at(k), Pn, pn, rn, k);
    P = Pn;
    p = pn;
    r = rn;
  }
  // Steps were visited backward; present them in ascending k order.
  Json ascending = Json::array();
  for (auto it = steps.rbegin(); it != steps.rend(); ++it)
    ascending.push_back(*it);

  Json cond;
  cond["bound"] = to_json(bound);
  cond["steps"] = ascending;
  cond["all_pass"] = ok && bound.ok;
  cond["violated_step"] = static_cast<long long>(violated_step);
  cond["violated_block"] = violated_block;
  write_file((fs::path(cfg.output.dir) / "conditions.json").string(),
             dump_json(cond));
  if (!ok) {
    write_metadata(cfg, 0.0);
    throw ConditionError(failure_message, violated_step);
  }
  note(quiet, "check: all saddle conditions hold for K=" +
                  std::to_string(cfg.params.K) + " steps");
  return 0;
}

int run_simulate(const RunConfig& cfg, bool quiet) {
  if (cfg.simulate.paths < 1) throw SchemaError("paths must be >= 1");
  const BuiltPolicy bp = build_policy(cfg.params, cfg.sched,
                                      cfg.simulate.policy, cfg.simulate.h_const);
  std::vector<PathRecord<double>> records;
  records.reserve(cfg.simulate.paths);
  for (std::size_t i = 0; i < cfg.simulate.paths; ++i)
    records.push_back(simulate_path<double>(
        cfg.params, cfg.X0, bp.policy, cfg.sched,
        RngSpec{cfg.simulate.seed, static_cast<std::uint64_t>(i)}));
  write_file((fs::path(cfg.output.dir) / "paths.csv").string(),
             paths_csv(cfg.params, records));
  note(quiet, "simulate: " + std::to_string(cfg.simulate.paths) +
                  " paths, policy=" + cfg.simulate.policy);
  return 0;
}

int run_evaluate(const RunConfig& cfg, bool quiet) {
  const EvaluateConfig& ec = cfg.evaluate;
  Json out;
  out["objective"] = ec.objective;
  out["policy"] = ec.policy;
  out["theta"] = cfg.params.theta;
  out["n_paths"] = static_cast<unsigned long long>(ec.paths);
  out["seed"] = static_cast<unsigned long long>(ec.seed);

  if (ec.objective == "risk_sensitive") {
    const BuiltPolicy bp =
        build_policy(cfg.params, cfg.sched, ec.policy, ec.h_const);
    const auto both = estimate_I_both<double>(cfg.params, bp.policy, cfg.sched,
                                              cfg.X0, ec.paths,
                                              RngSpec{ec.seed, 0});
    const McEstimate& linear = both.first;
    const McEstimate& logscale = both.second;
    McEstimate J;
    J.mean = -logscale.mean / cfg.params.theta;
    J.std_error = logscale.std_error / cfg.params.theta;
    J.n_paths = logscale.n_paths;
    out["estimate_lnI"] = to_json(logscale);
    out["estimate_I"] = to_json(linear);
    out["estimate_J"] = to_json(J);
    if (bp.solved) {
      out["analytic"] = to_json(criterion_from_value<double>(
          bp.solved->value, cfg.X0, cfg.params.theta));
    }
    note(quiet, "evaluate: J=" + format_double(J.mean) + " +/- " +
                    format_double(J.std_error));
  } else if (ec.objective == "kelly") {
    const BuiltPolicy bp = build_policy(
        cfg.params, cfg.sched, ec.policy == "analytic" ? "kelly" : ec.policy,
        ec.h_const);
    const McEstimate mc = kelly_objective_mc<double>(
        cfg.params, bp.policy, cfg.X0, ec.paths, RngSpec{ec.seed, 0});
    out["estimate"] = to_json(mc);
    if (ec.policy != "constant") {
      const KellyPolicy<double> kp = analytic_kelly_policy<double>(cfg.params);
      out["exact"] = kelly_objective_exact<double>(
          cfg.params, kp.D, kp.dvec, cfg.X0,
          Mat<double>::Zero(cfg.params.n, cfg.params.n));
    }
    note(quiet, "evaluate: kelly objective=" + format_double(mc.mean) +
                    " +/- " + format_double(mc.std_error));
  } else if (ec.objective == "game_value") {
    const auto sr = solve(cfg.params, cfg.sched);
    const MarketParams<double> mp = cfg.params;
    const QuadraticValue<double> qv = sr.value;
    const auto hbar = [mp, qv](index_t k, const Vec<double>& X) {
      const std::size_t kz = static_cast<std::size_t>(k);
      return optimal_controls_primary<double>(mp, k, X, qv.P[kz + 1],
                                              qv.p[kz + 1])
          .hstar;
    };
    const auto gamma = [mp, qv](index_t k, const Vec<double>& X) {
      const std::size_t kz = static_cast<std::size_t>(k);
      const GammaFeedback<double> gf =
          gamma_feedback<double>(mp, qv.P[kz + 1], qv.p[kz + 1]);
      return Vec<double>(gf.Kfrak * X + gf.kfrak);
    };
    const auto eta = [mp](index_t, const Vec<double>&) {
      return Vec<double>(Vec<double>::Zero(mp.m));
    };
    const McEstimate est = estimate_game_value<double>(
        cfg.params, cfg.sched, hbar, gamma, eta, cfg.X0, ec.paths,
        RngSpec{ec.seed, 0});
    out["estimate"] = to_json(est);
    out["analytic_u0"] =
        criterion_from_value<double>(qv, cfg.X0, cfg.params.theta).u0;
    note(quiet, "evaluate: game value=" + format_double(est.mean) + " +/- " +
                    format_double(est.std_error));
  } else {
    throw SchemaError(
        "config key 'evaluate.objective' must be one of risk_sensitive, "
        "kelly, game_value");
  }
  write_file((fs::path(cfg.output.dir) / "evaluate.json").string(),
             dump_json(out));
  return 0;
}

int run_train(const RunConfig& cfg, bool quiet) {
  const fs::path dir(cfg.output.dir);
  if (cfg.train.problem == "kelly") {
    const KellyTrainResult<double> res =
        train_kelly<double>(cfg.params, cfg.X0, cfg.train.cfg);
    write_file((dir / "trace.csv").string(), trace_csv(res.trace));
    write_file((dir / "checkpoint.json").string(),
               dump_json(checkpoint_json(res)));
    note(quiet,
         "train: kelly, iterations=" + std::to_string(res.iterations_run) +
             (res.diverged ? " (diverged)" : ""));
    return 0;
  }
  if (cfg.train.algorithm == "npg") {
    const GameTrainResult<double> res =
        train_game<double>(cfg.params, cfg.sched, cfg.X0, cfg.train.cfg);
    write_file((dir / "trace.csv").string(), trace_csv(res.trace));
    write_file((dir / "checkpoint.json").string(),
               dump_json(checkpoint_json(res, "npg")));
    note(quiet,
         "train: game npg, iterations=" + std::to_string(res.iterations_run) +
             (res.diverged ? " (diverged)" : ""));
    return 0;
  }

  // Actor-critic loop.
  const TrainConfig& tc = cfg.train.cfg;
  if (cfg.params.theta <= 0.0)
    throw SchemaError("game training requires theta > 0 (theta = 0 is Kelly mode)");
  if (tc.episodes < tc.batch)
    throw SchemaError("episodes must cover at least one batch");
  GameTrainResult<double> res;
  res.policy = AffineGamePolicy<double>::zero(cfg.params);
  CriticParams<double> critic = CriticParams<double>::zero(cfg.params);
  AffineGamePolicy<double> analytic;
  try {
    const auto sr = solve(cfg.params, cfg.sched);
    analytic = analytic_game_policy<double>(cfg.params, sr.value);
    res.has_analytic = true;
  } catch (const std::exception&) {
    res.has_analytic = false;
  }
  const std::size_t iterations = tc.episodes / tc.batch;
  for (std::size_t it = 1; it <= iterations; ++it) {
    const std::uint64_t offset = static_cast<std::uint64_t>((it - 1) * tc.batch);
    const RolloutBatch<double> batch =
        rollout_batch<double>(cfg.params, cfg.sched, res.policy, cfg.X0,
                              tc.batch, tc.seed, tc.x0_spread, offset);
    const ActorCriticDiagnostics<double> diag = actor_critic_step<double>(
        cfg.params, cfg.sched, res.policy, critic, batch, tc, it);
    TraceRow row;
    row.iteration = it;
    row.episodes_used = it * tc.batch;
    row.objective = diag.objective.mean;
    row.objective_se = diag.objective.std_error;
    row.policy_grad_norm = diag.policy_grad_norm;
    row.tilt_grad_norm = diag.tilt_grad_norm;
    row.step_size = schedule_step(tc, it);
    if (res.has_analytic) {
      double dD = 0.0, dd = 0.0, dE = 0.0, de = 0.0;
      for (std::size_t k = 0; k < res.policy.D.size(); ++k) {
        dD = std::max(dD, (res.policy.D[k] - analytic.D[k]).norm());
        dd = std::max(dd, (res.policy.dvec[k] - analytic.dvec[k]).norm());
        dE = std::max(dE, (res.policy.E[k] - analytic.E[k]).norm());
        de = std::max(de, (res.policy.evec[k] - analytic.evec[k]).norm());
      }
      row.dist_D = dD;
      row.dist_d = dd;
      row.dist_E = dE;
      row.dist_e = de;
    }
    double nF = 0.0, nf = 0.0;
    for (std::size_t k = 0; k < res.policy.F.size(); ++k) {
      nF = std::max(nF, res.policy.F[k].norm());
      nf = std::max(nf, res.policy.fvec[k].norm());
    }
    row.norm_F = nF;
    row.norm_f = nf;
    res.trace.push_back(row);
    res.iterations_run = it;
    if (std::abs(diag.objective.mean) > tc.divergence_threshold) {
      res.diverged = true;
      break;
    }
  }
  write_file((dir / "trace.csv").string(), trace_csv(res.trace));
  Json ckpt = checkpoint_json(res, "actor_critic");
  Json cj;
  Json Pm = Json::array();
  for (const auto& Pk : critic.P) Pm.push_back(matrix_json(Pk));
  Json pv = Json::array();
  for (const auto& pk : critic.p) pv.push_back(vector_json(pk));
  Json rv = Json::array();
  for (double rk : critic.r) rv.push_back(rk);
  cj["P"] = Pm;
  cj["p"] = pv;
  cj["r"] = rv;
  ckpt["critic"] = cj;
  write_file((dir / "checkpoint.json").string(), dump_json(ckpt));
  note(quiet, "train: game actor_critic, iterations=" +
                  std::to_string(res.iterations_run) +
                  (res.diverged ? " (diverged)" : ""));
  return 0;
}

int run_decompose(const RunConfig& cfg, bool quiet) {
  const index_t k = cfg.decompose.k;
  if (k < 0 || k >= cfg.params.K)
    throw SchemaError("decompose step k out of range");
  Mat<double> P_next = Mat<double>::Zero(cfg.params.n, cfg.params.n);
  Vec<double> p_next = Vec<double>::Zero(cfg.params.n);
  SaddleControls<double> saddle;
  if (cfg.params.theta > 0.0) {
    const auto sr = solve(cfg.params, cfg.sched);
    P_next = sr.value.P[static_cast<std::size_t>(k) + 1];
    p_next = sr.value.p[static_cast<std::size_t>(k) + 1];
    saddle =
        optimal_controls_primary<double>(cfg.params, k, cfg.X0, P_next, p_next);
  } else {
    saddle.hstar = kelly_control<double>(cfg.params, cfg.X0);
    saddle.gammastar = Vec<double>::Zero(cfg.params.d);
    saddle.etastar = Vec<double>::Zero(cfg.params.m);
  }

  Json out;
  out["k"] = static_cast<long long>(k);
  out["X"] = vector_json(cfg.X0);
  Json sj;
  sj["hstar"] = vector_json(saddle.hstar);
  sj["gammastar"] = vector_json(saddle.gammastar);
  sj["etastar"] = vector_json(saddle.etastar);
  out["saddle"] = sj;

  Json decs = Json::array();
  const std::string& variant = cfg.decompose.variant;
  if (variant == "penalized" || variant == "all")
    decs.push_back(to_json(
        decompose_penalized_kelly<double>(cfg.params, saddle, cfg.X0)));
  if (variant == "rotated_I" || variant == "all")
    decs.push_back(to_json(
        decompose_fks_I<double>(cfg.params, k, cfg.X0, P_next, p_next)));
  if (variant == "rotated_II" || variant == "all")
    decs.push_back(to_json(
        decompose_fks_II<double>(cfg.params, k, cfg.X0, P_next, p_next)));
  out["decompositions"] = decs;

  const ReferencePortfolios<double> ref =
      reference_portfolios<double>(cfg.params, k, cfg.X0, P_next, p_next);
  Json rj;
  rj["h_kelly"] = vector_json(ref.h_kelly);
  rj["h_bench"] = vector_json(ref.h_bench);
  rj["h_ihp"] = vector_json(ref.h_ihp);
  out["reference"] = rj;

  write_file((fs::path(cfg.output.dir) / "decomposition.json").string(),
             dump_json(out));
  note(quiet, "decompose: k=" + std::to_string(k) + ", variants=" + variant);
  return 0;
}

int run_oracle(const RunConfig& cfg, bool quiet) {
  Json out;
  out["kind"] = cfg.oracle.kind;
  if (cfg.oracle.kind == "dpp") {
    const auto sr = solve(cfg.params, cfg.sched);
    const OracleReport rep = dpp_brute_force<double>(
        cfg.params, sr.value, cfg.sched, cfg.oracle.k, cfg.X0,
        cfg.oracle.options);
    out["k"] = static_cast<long long>(cfg.oracle.k);
    out["report"] = to_json(rep);
    note(quiet, "oracle: dpp gap=" + format_double(rep.gap));
  } else {
    if (cfg.oracle.psi_atoms.empty())
      throw SchemaError("duality oracle requires 'oracle.psi_atoms'");
    if (cfg.oracle.psi_atoms.size() != cfg.oracle.q_weights.size())
      throw SchemaError("'oracle.psi_atoms' and 'oracle.q_weights' must have "
                        "the same length");
    const DualityReport<double> rep = duality_brute_force<double>(
        cfg.oracle.psi_atoms, cfg.oracle.q_weights, cfg.oracle.grid);
    out["report"] = to_json(rep);
    note(quiet, "oracle: duality gap=" + format_double(rep.gap));
  }
  write_file((fs::path(cfg.output.dir) / "oracle.json").string(),
             dump_json(out));
  return 0;
}

}  // namespace

int run(const RunConfig& cfg, bool quiet) {
  static const char* kModes[] = {"solve",     "check", "simulate", "evaluate",
                                 "train",     "decompose", "oracle"};
  bool known = false;
  for (const char* m : kModes) known = known || cfg.mode == m;
  if (!known) throw SchemaError("unknown mode: " + cfg.mode);

  std::error_code ec;
  fs::create_directories(cfg.output.dir, ec);
  if (ec)
    throw SchemaError("cannot create output directory: " + cfg.output.dir);

  const auto t0 = std::chrono::steady_clock::now();
  int status = 0;
  if (cfg.mode == "solve")
    status = run_solve(cfg, quiet);
  else if (cfg.mode == "check")
    status = run_check(cfg, quiet);
  else if (cfg.mode == "simulate")
    status = run_simulate(cfg, quiet);
  else if (cfg.mode == "evaluate")
    status = run_evaluate(cfg, quiet);
  else if (cfg.mode == "train")
    status = run_train(cfg, quiet);
  else if (cfg.mode == "decompose")
    status = run_decompose(cfg, quiet);
  else
    status = run_oracle(cfg, quiet);

  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  write_metadata(cfg, elapsed);
  return status;
}

}  // namespace rskelly::io
