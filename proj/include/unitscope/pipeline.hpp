#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "unitscope/attack.hpp"
#include "unitscope/dissect.hpp"
#include "unitscope/intervene.hpp"
#include "unitscope/paint.hpp"
#include "unitscope/scenegen.hpp"

namespace unitscope {

struct TrainStageConfig {
    int epochs = 3;
    float learning_rate = 1e-3f;
    int batch_size = 32;

    OptimizerConfig optimizer(std::uint64_t seed) const;
};

struct DissectStageConfig {
    double q = 0.01;
    double min_iou = 0.04;
    std::size_t reservoir_capacity = QuantileReservoir::kDefaultCapacity;
    std::vector<std::string> classifier_layers = {"conv1", "conv2", "conv3", "conv4"};
    std::string generator_layer = "layer2";
    /// Generated images used to fit thresholds and to accumulate IoU.
    int generator_fit_samples = 2000;
    int generator_eval_samples = 1000;
    /// Units per layer with exemplar strips in the report.
    int exemplar_units = 8;
    int exemplars = 4;
    /// Let generator dissection run with a segmenter below the quality floor.
    bool allow_weak_segmenter = false;
};

struct AblateStageConfig {
    std::string layer = "conv4";
    int top_units = 4;
    int top_set = 20;
    std::vector<int> curve_sizes = {0, 1, 2, 4, 8, 16, 20, 32, 64};
    double level = 0.95;
};

struct InterveneGenStageConfig {
    int units = 8;
    int removal_samples = 1000;
    int context_samples = 200;
    double success_pixels = 20.0;
    int permutations = 1000;
    int keep_pairs = 8;
};

struct AttackStageConfig {
    int images = 100;
    float step = 1.0f / 255.0f;
    int iterations = 300;
    float linf_bound = 8.0f / 255.0f;
    float l2_weight = 0.1f;
    float margin = 0.5f;
    int random_units = 8;
    double level = 0.99;
    int triptychs = 6;
};

struct ServeStageConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    int palette_units = 20;
    std::string cors_origin = "*";
};

struct RunConfig {
    std::uint64_t seed = 1;
    CorpusConfig corpus;
    TrainStageConfig classifier;
    TrainStageConfig segmenter{4, 1e-3f, 32};
    int segmenter_background_scenes = 200;
    TrainStageConfig generator{6, 1e-3f, 32};
    DissectStageConfig dissect;
    AblateStageConfig ablate;
    InterveneGenStageConfig intervene;
    AttackStageConfig attack;
    ServeStageConfig serve;

    /// Corpus settings with the seed derived from the master seed.
    CorpusConfig corpus_config() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static RunConfig from_json(const nlohmann::json& j);
    std::string hash() const;
};

enum class Stage {
    corpus,
    classifier,
    segmenter,
    generator,
    dissect_classifier,
    dissect_generator,
    ablate,
    intervene_gen,
    attack,
};
std::string to_string(Stage s);
/// Command that produces the stage's artifacts.
std::string command_for(Stage s);

/// Missing or stale prerequisite; the CLI exits with status 2.
class PreconditionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Workspace {
public:
    Workspace(std::filesystem::path root, RunConfig config, bool force = false);

    const std::filesystem::path& root() const noexcept { return root_; }
    const RunConfig& config() const noexcept { return config_; }
    bool force() const noexcept { return force_; }
    std::filesystem::path path(const std::string& relative) const { return root_ / relative; }

    /// Hash over the configuration sections the stage and its inputs depend on.
    std::string stage_hash(Stage s) const;
    std::uint64_t stage_seed(const std::string& name) const;

    bool complete(Stage s) const;
    /// Complete and produced with the current configuration.
    bool up_to_date(Stage s) const;
    /// Throws PreconditionError naming the command to run, or on a hash mismatch unless forced.
    void require(Stage s) const;
    void mark_complete(Stage s) const;

    /// Adds the stage and config hashes to an artifact.
    nlohmann::json stamp(Stage s, nlohmann::json j) const;
    void write_json(const std::string& relative, const nlohmann::json& j) const;
    nlohmann::json read_json(const std::string& relative) const;

    void set_log(std::function<void(const std::string&)> sink) { log_ = std::move(sink); }
    void log(const std::string& message) const;

private:
    std::filesystem::path record_path(Stage s) const;

    std::filesystem::path root_;
    RunConfig config_;
    bool force_;
    std::function<void(const std::string&)> log_;
};

// Stages. Each writes its artifacts and a stage record under the workspace.

void run_gen_corpus(const Workspace& ws);
void run_train_classifier(const Workspace& ws);
void run_train_segmenter(const Workspace& ws);
void run_train_generator(const Workspace& ws);
void run_dissect_classifier(const Workspace& ws);
void run_dissect_generator(const Workspace& ws);
void run_ablate(const Workspace& ws);
void run_intervene_gen(const Workspace& ws);
void run_attack(const Workspace& ws);
/// Throws PreconditionError listing every missing artifact.
void run_report(const Workspace& ws);

/// Runs the stage (after its prerequisites, recursively) unless it is up to date.
void ensure_stage(const Workspace& ws, Stage s);
void run_stage(const Workspace& ws, Stage s);

// Loaders for stage outputs.

SceneSet load_corpus_split(const Workspace& ws, const std::string& split);
std::pair<ModelSpec, ParameterStore> load_stage_model(const Workspace& ws, Stage s);
GeneratorModel load_generator(const Workspace& ws);
LatentGaussian load_latent(const Workspace& ws);
Segmenter load_segmenter(const Workspace& ws);
PaintEngine make_paint_engine(const Workspace& ws);

/// Artifact files the report reads, relative to the workspace, with the stage producing each.
std::vector<std::pair<std::string, Stage>> report_inputs();
/// Writes report/index.html from stage artifacts; assumes every report input exists.
void render_report(const Workspace& ws);

} // namespace unitscope
