// Configuration-driven front end: JSON config parsing, artifact serialization
// (JSON reports with 17-significant-digit floats, CSV tables), and the mode
// dispatcher behind the command-line tool. All nondeterministic output
// (timestamps, wall time) is isolated in a separate metadata file so reruns
// of an identical config produce byte-identical artifacts.
#ifndef RSKELLY_IO_H
#define RSKELLY_IO_H

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rskelly/controls.hpp"
#include "rskelly/duality.hpp"
#include "rskelly/evaluator.hpp"
#include "rskelly/model.hpp"
#include "rskelly/riccati.hpp"
#include "rskelly/rl.hpp"
#include "rskelly/simulator.hpp"
#include "rskelly/types.hpp"

namespace rskelly::io {

using Json = nlohmann::ordered_json;

// ============================ run configuration ============================

struct SimulateConfig {
  std::size_t paths = 1;
  std::uint64_t seed = 0;
  std::string policy = "analytic";  // analytic | kelly | constant
  Vec<double> h_const;              // allocation when policy == "constant"
};

struct EvaluateConfig {
  std::string objective = "risk_sensitive";  // risk_sensitive | kelly | game_value
  std::size_t paths = 10000;
  std::uint64_t seed = 0;
  std::string policy = "analytic";  // analytic | kelly | constant
  Vec<double> h_const;
};

struct TrainBlock {
  std::string problem = "game";   // game | kelly
  std::string algorithm = "npg";  // npg | actor_critic
  TrainConfig cfg;
};

struct DecomposeConfig {
  index_t k = 0;
  std::string variant = "all";  // penalized | rotated_I | rotated_II | all
};

struct OracleConfig {
  std::string kind = "dpp";  // dpp | duality
  index_t k = 0;
  OracleOptions options;
  std::vector<double> psi_atoms;  // duality oracle inputs
  std::vector<double> q_weights;
  DualityGridOptions grid;
};

struct OutputConfig {
  std::string dir = "out";
};

struct RunConfig {
  std::string mode;  // normally set from the subcommand
  MarketParams<double> params;
  ExplorationSchedule<double> sched;
  Vec<double> X0;
  SimulateConfig simulate;
  EvaluateConfig evaluate;
  TrainBlock train;
  DecomposeConfig decompose;
  OracleConfig oracle;
  OutputConfig output;
};

// Parses and validates a JSON config document. Throws SchemaError with a
// message naming the offending key on any structural problem.
RunConfig load_config(const std::string& path);

// Command-line overrides applied after parsing (--seed, --paths, --out).
void apply_overrides(RunConfig& cfg, const std::optional<std::uint64_t>& seed,
                     const std::optional<std::size_t>& paths,
                     const std::optional<std::string>& out_dir);

// ============================== formatting =================================

// Shortest representation with up to 17 significant digits (%.17g), enough
// for exact double round-trips.
std::string format_double(double x);

// JSON text with 2-space indentation and all floating-point numbers printed
// via format_double; non-finite values become null.
std::string dump_json(const Json& j);

Json vector_json(const Vec<double>& v);
Json matrix_json(const Mat<double>& M);

// ============================== serializers ================================

Json to_json(const ConditionReport& rep);
Json to_json(const BoundReport& rep);
Json to_json(const McEstimate& est);
Json to_json(const DualityReport<double>& rep);
Json to_json(const OracleReport& rep);
Json to_json(const FksDecomposition<double>& dec);
Json to_json(const CriterionValues<double>& cv);

// One row per step k = 0..K: flattened row-major P_k, p_k, r_k, and (for
// k < K) the condition margins of the step that produced them.
std::string value_csv(const MarketParams<double>& mp,
                      const QuadraticValue<double>& qv,
                      const ExplorationSchedule<double>& sched);

// One row per (path, step): path_id, k, X..., h..., reward_term,
// logexcess_running.
std::string paths_csv(const MarketParams<double>& mp,
                      const std::vector<PathRecord<double>>& records);

// Uniform training trace table (Kelly rows carry zero tilt columns).
std::string trace_csv(const std::vector<TraceRow>& rows);

Json checkpoint_json(const GameTrainResult<double>& result,
                     const std::string& algorithm);
Json checkpoint_json(const KellyTrainResult<double>& result);

void write_file(const std::string& path, const std::string& content);

// ================================ driver ===================================

// Executes one mode, writing artifacts into cfg.output.dir. Returns 0 on
// success; throws SchemaError / ConditionError / NumericalError for the
// 1 / 2 / 3 exit paths (artifacts produced before the failure are kept).
int run(const RunConfig& cfg, bool quiet);

}  // namespace rskelly::io

#endif  // RSKELLY_IO_H
