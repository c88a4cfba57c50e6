#include "unitscope/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <random>

#include "unitscope/io.hpp"
#include "unitscope/parallel.hpp"
#include "unitscope/render.hpp"
#include "unitscope/seed.hpp"
#include "unitscope/stats.hpp"
#include "unitscope/zoo.hpp"

namespace unitscope {

namespace fs = std::filesystem;

namespace {

std::string hex_hash(const std::string& text)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
    return buf;
}

nlohmann::json train_json(const TrainStageConfig& c)
{
    return {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}};
}

TrainStageConfig train_from(const nlohmann::json& j)
{
    return {j.at("epochs").get<int>(), j.at("learning_rate").get<float>(), j.at("batch_size").get<int>()};
}

void reject_unknown(const nlohmann::json& given, const nlohmann::json& known, const std::string& where)
{
    if (!given.is_object()) return;
    if (!known.is_object()) throw std::invalid_argument("config key '" + where + "' must not be an object");
    for (const auto& [k, v] : given.items()) {
        const std::string path = where.empty() ? k : where + "." + k;
        if (!known.contains(k)) throw std::invalid_argument("unknown config key '" + path + "'");
        reject_unknown(v, known.at(k), path);
    }
}

const char* record_name(Stage s)
{
    switch (s) {
    case Stage::corpus: return "corpus/stage.json";
    case Stage::classifier: return "models/classifier.stage.json";
    case Stage::segmenter: return "models/segmenter.stage.json";
    case Stage::generator: return "models/generator.stage.json";
    case Stage::dissect_classifier: return "dissect/classifier/stage.json";
    case Stage::dissect_generator: return "dissect/generator/stage.json";
    case Stage::ablate: return "intervene/ablate.stage.json";
    case Stage::intervene_gen: return "intervene/generator.stage.json";
    case Stage::attack: return "attack/stage.json";
    }
    return "";
}

std::vector<Stage> stage_inputs(Stage s)
{
    switch (s) {
    case Stage::corpus: return {};
    case Stage::classifier:
    case Stage::segmenter:
    case Stage::generator: return {Stage::corpus};
    case Stage::dissect_classifier: return {Stage::classifier};
    case Stage::dissect_generator: return {Stage::generator, Stage::segmenter};
    case Stage::ablate: return {Stage::classifier};
    case Stage::intervene_gen: return {Stage::dissect_generator};
    case Stage::attack: return {Stage::ablate};
    }
    return {};
}

nlohmann::json stage_section(const RunConfig& c, Stage s)
{
    const nlohmann::json j = c.to_json();
    switch (s) {
    case Stage::corpus: return {{"seed", c.seed}, {"corpus", j.at("corpus")}};
    case Stage::classifier: return j.at("classifier");
    case Stage::segmenter: return {{"train", j.at("segmenter")}, {"background", c.segmenter_background_scenes}};
    case Stage::generator: return j.at("generator");
    case Stage::dissect_classifier:
    case Stage::dissect_generator: return j.at("dissect");
    case Stage::ablate: return j.at("ablate");
    case Stage::intervene_gen: return j.at("intervene");
    case Stage::attack: return j.at("attack");
    }
    return {};
}

ParameterStore params_for(const ModelSpec& model, const ParameterStore& all)
{
    ParameterStore p;
    for (const auto& l : model.layers)
        if (all.contains(l.name)) p[l.name] = all.at(l.name);
    p.check_against(model);
    return p;
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& labels)
{
    return all_class_accuracy(pred, labels);
}

nlohmann::json labels_json(const std::vector<UnitLabel>& labels, const ConceptCatalog& catalog)
{
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : labels) {
        nlohmann::json j = {{"unit", l.unit}, {"score", l.score}};
        if (l.matched()) {
            j["concept"] = l.concept_id;
            j["name"] = catalog.at(l.concept_id).name;
            j["category"] = to_string(catalog.at(l.concept_id).category);
        } else {
            j["concept"] = nullptr;
        }
        arr.push_back(j);
    }
    return arr;
}

/// Units matched to a concept, by descending score; ties by unit.
std::vector<UnitLabel> best_labeled(std::vector<UnitLabel> labels, int n)
{
    labels.erase(std::remove_if(labels.begin(), labels.end(), [](const UnitLabel& l) { return !l.matched(); }),
                 labels.end());
    std::stable_sort(labels.begin(), labels.end(),
                     [](const UnitLabel& a, const UnitLabel& b) { return a.score > b.score; });
    if (static_cast<int>(labels.size()) > n) labels.resize(static_cast<std::size_t>(n));
    return labels;
}

/// Strip of exemplar overlays for one unit.
Tensor exemplar_strip(const std::vector<Exemplar>& ex, const std::function<Tensor(int)>& image_of)
{
    std::vector<Tensor> tiles;
    for (const auto& e : ex) tiles.push_back(overlay_mask(image_of(e.image), e.mask));
    return hconcat(tiles);
}

Tensor image_grid(const std::vector<Tensor>& images, int per_row)
{
    std::vector<Tensor> rows;
    for (std::size_t b = 0; b < images.size(); b += static_cast<std::size_t>(per_row)) {
        std::vector<Tensor> row(images.begin() + static_cast<std::ptrdiff_t>(b),
                                images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), b + per_row)));
        while (static_cast<int>(row.size()) < per_row) row.push_back(Tensor(row.front().shape(), 1.0f));
        rows.push_back(hconcat(row));
    }
    return vconcat(rows);
}

Tensor item_of(const Tensor& batch, int i)
{
    const Tensor s = batch.slice(i, i + 1);
    return s.reshaped(s.item_shape());
}

std::vector<int> random_units(int units, int n, std::uint64_t seed)
{
    std::vector<int> all(static_cast<std::size_t>(units));
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(static_cast<std::size_t>(std::min(n, units)));
    return all;
}

SegProvider segment_outputs(const Segmenter& seg)
{
    return [&seg](int, const Tensor& outputs) {
        Tensor clamped = outputs;
        for (auto& v : clamped.storage()) v = std::clamp(v, 0.0f, 1.0f);
        return segment_images(seg.model, seg.params, clamped);
    };
}

} // namespace

OptimizerConfig TrainStageConfig::optimizer(std::uint64_t seed) const
{
    OptimizerConfig o;
    o.learning_rate = learning_rate;
    o.epochs = epochs;
    o.batch_size = batch_size;
    o.seed = seed;
    return o;
}

CorpusConfig RunConfig::corpus_config() const
{
    CorpusConfig c = corpus;
    c.seed = derive_seed(seed, "corpus");
    return c;
}

nlohmann::json RunConfig::to_json() const
{
    nlohmann::json cj = corpus.to_json();
    cj.erase("seed");
    return {
        {"seed", seed},
        {"corpus", cj},
        {"classifier", train_json(classifier)},
        {"segmenter", train_json(segmenter)},
        {"segmenter_background_scenes", segmenter_background_scenes},
        {"generator", train_json(generator)},
        {"dissect",
         {{"q", dissect.q},
          {"min_iou", dissect.min_iou},
          {"reservoir_capacity", dissect.reservoir_capacity},
          {"classifier_layers", dissect.classifier_layers},
          {"generator_layer", dissect.generator_layer},
          {"generator_fit_samples", dissect.generator_fit_samples},
          {"generator_eval_samples", dissect.generator_eval_samples},
          {"exemplar_units", dissect.exemplar_units},
          {"exemplars", dissect.exemplars},
          {"allow_weak_segmenter", dissect.allow_weak_segmenter}}},
        {"ablate",
         {{"layer", ablate.layer},
          {"top_units", ablate.top_units},
          {"top_set", ablate.top_set},
          {"curve_sizes", ablate.curve_sizes},
          {"level", ablate.level}}},
        {"intervene",
         {{"units", intervene.units},
          {"removal_samples", intervene.removal_samples},
          {"context_samples", intervene.context_samples},
          {"success_pixels", intervene.success_pixels},
          {"permutations", intervene.permutations},
          {"keep_pairs", intervene.keep_pairs}}},
        {"attack",
         {{"images", attack.images},
          {"step", attack.step},
          {"iterations", attack.iterations},
          {"linf_bound", attack.linf_bound},
          {"l2_weight", attack.l2_weight},
          {"margin", attack.margin},
          {"random_units", attack.random_units},
          {"level", attack.level},
          {"triptychs", attack.triptychs}}},
        {"serve",
         {{"host", serve.host},
          {"port", serve.port},
          {"palette_units", serve.palette_units},
          {"cors_origin", serve.cors_origin}}},
    };
}

RunConfig RunConfig::from_json(const nlohmann::json& given)
{
    nlohmann::json j = RunConfig{}.to_json();
    reject_unknown(given, j, "");
    j.merge_patch(given);
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    nlohmann::json cj = j.at("corpus");
    cj["seed"] = 0;
    c.corpus = CorpusConfig::from_json(cj);
    c.classifier = train_from(j.at("classifier"));
    c.segmenter = train_from(j.at("segmenter"));
    c.segmenter_background_scenes = j.at("segmenter_background_scenes").get<int>();
    c.generator = train_from(j.at("generator"));
    const auto& d = j.at("dissect");
    c.dissect.q = d.at("q").get<double>();
    c.dissect.min_iou = d.at("min_iou").get<double>();
    c.dissect.reservoir_capacity = d.at("reservoir_capacity").get<std::size_t>();
    c.dissect.classifier_layers = d.at("classifier_layers").get<std::vector<std::string>>();
    c.dissect.generator_layer = d.at("generator_layer").get<std::string>();
    c.dissect.generator_fit_samples = d.at("generator_fit_samples").get<int>();
    c.dissect.generator_eval_samples = d.at("generator_eval_samples").get<int>();
    c.dissect.exemplar_units = d.at("exemplar_units").get<int>();
    c.dissect.exemplars = d.at("exemplars").get<int>();
    c.dissect.allow_weak_segmenter = d.at("allow_weak_segmenter").get<bool>();
    const auto& a = j.at("ablate");
    c.ablate.layer = a.at("layer").get<std::string>();
    c.ablate.top_units = a.at("top_units").get<int>();
    c.ablate.top_set = a.at("top_set").get<int>();
    c.ablate.curve_sizes = a.at("curve_sizes").get<std::vector<int>>();
    c.ablate.level = a.at("level").get<double>();
    const auto& iv = j.at("intervene");
    c.intervene.units = iv.at("units").get<int>();
    c.intervene.removal_samples = iv.at("removal_samples").get<int>();
    c.intervene.context_samples = iv.at("context_samples").get<int>();
    c.intervene.success_pixels = iv.at("success_pixels").get<double>();
    c.intervene.permutations = iv.at("permutations").get<int>();
    c.intervene.keep_pairs = iv.at("keep_pairs").get<int>();
    const auto& at = j.at("attack");
    c.attack.images = at.at("images").get<int>();
    c.attack.step = at.at("step").get<float>();
    c.attack.iterations = at.at("iterations").get<int>();
    c.attack.linf_bound = at.at("linf_bound").get<float>();
    c.attack.l2_weight = at.at("l2_weight").get<float>();
    c.attack.margin = at.at("margin").get<float>();
    c.attack.random_units = at.at("random_units").get<int>();
    c.attack.level = at.at("level").get<double>();
    c.attack.triptychs = at.at("triptychs").get<int>();
    const auto& sv = j.at("serve");
    c.serve.host = sv.at("host").get<std::string>();
    c.serve.port = sv.at("port").get<int>();
    c.serve.palette_units = sv.at("palette_units").get<int>();
    c.serve.cors_origin = sv.at("cors_origin").get<std::string>();
    return c;
}

std::string RunConfig::hash() const
{
    nlohmann::json j = to_json();
    j.erase("serve");
    return hex_hash(j.dump());
}

std::string to_string(Stage s)
{
    switch (s) {
    case Stage::corpus: return "corpus";
    case Stage::classifier: return "classifier";
    case Stage::segmenter: return "segmenter";
    case Stage::generator: return "generator";
    case Stage::dissect_classifier: return "classifier dissection";
    case Stage::dissect_generator: return "generator dissection";
    case Stage::ablate: return "ablation";
    case Stage::intervene_gen: return "generator intervention";
    case Stage::attack: return "attack";
    }
    return "";
}

std::string command_for(Stage s)
{
    switch (s) {
    case Stage::corpus: return "gen-corpus";
    case Stage::classifier: return "train classifier";
    case Stage::segmenter: return "train segmenter";
    case Stage::generator: return "train generator";
    case Stage::dissect_classifier: return "dissect classifier";
    case Stage::dissect_generator: return "dissect generator";
    case Stage::ablate: return "ablate";
    case Stage::intervene_gen: return "intervene-gen";
    case Stage::attack: return "attack";
    }
    return "";
}

Workspace::Workspace(fs::path root, RunConfig config, bool force)
    : root_(std::move(root)), config_(std::move(config)), force_(force)
{
}

std::string Workspace::stage_hash(Stage s) const
{
    nlohmann::json j = {{"stage", to_string(s)}, {"config", stage_section(config_, s)}};
    for (Stage in : stage_inputs(s)) j["inputs"][to_string(in)] = stage_hash(in);
    return hex_hash(j.dump());
}

std::uint64_t Workspace::stage_seed(const std::string& name) const
{
    return derive_seed(config_.seed, name);
}

fs::path Workspace::record_path(Stage s) const
{
    return root_ / record_name(s);
}

bool Workspace::complete(Stage s) const
{
    return fs::exists(record_path(s));
}

bool Workspace::up_to_date(Stage s) const
{
    if (!complete(s)) return false;
    try {
        return nlohmann::json::parse(read_text(record_path(s))).at("stage_hash") == stage_hash(s);
    } catch (const std::exception&) {
        return false;
    }
}

void Workspace::require(Stage s) const
{
    if (!complete(s))
        throw PreconditionError("missing " + to_string(s) + " artifacts (" + record_name(s) + "); run `unitscope " +
                                command_for(s) + "` first");
    if (up_to_date(s) || force_) return;
    const auto rec = nlohmann::json::parse(read_text(record_path(s)));
    throw PreconditionError(to_string(s) + " artifacts were produced with a different configuration (hash " +
                            rec.value("stage_hash", std::string("?")) + ", current " + stage_hash(s) +
                            "); re-run `unitscope " + command_for(s) + "` or pass --force");
}

void Workspace::mark_complete(Stage s) const
{
    write_json(record_name(s), stamp(s, {{"stage", to_string(s)}, {"command", command_for(s)}}));
}

nlohmann::json Workspace::stamp(Stage s, nlohmann::json j) const
{
    j["stage_hash"] = stage_hash(s);
    j["config_hash"] = config_.hash();
    return j;
}

void Workspace::write_json(const std::string& relative, const nlohmann::json& j) const
{
    const fs::path p = root_ / relative;
    fs::create_directories(p.parent_path());
    write_text(p, j.dump(2) + "\n");
}

nlohmann::json Workspace::read_json(const std::string& relative) const
{
    return nlohmann::json::parse(read_text(root_ / relative));
}

void Workspace::log(const std::string& message) const
{
    if (log_) log_(message);
}

namespace {

void begin_stage(const Workspace& ws, Stage s)
{
    for (Stage in : stage_inputs(s)) ws.require(in);
    fs::remove(ws.path(record_name(s)));
    ws.log("running " + command_for(s));
}

void save_image(const Workspace& ws, const std::string& relative, const Tensor& img)
{
    const fs::path p = ws.path(relative);
    fs::create_directories(p.parent_path());
    save_png(p, img);
}

} // namespace

SceneSet load_corpus_split(const Workspace& ws, const std::string& split)
{
    ws.require(Stage::corpus);
    const fs::path dir = ws.path("corpus");
    return load_split(dir, load_manifest(dir), split);
}

std::pair<ModelSpec, ParameterStore> load_stage_model(const Workspace& ws, Stage s)
{
    ws.require(s);
    switch (s) {
    case Stage::classifier: return load_model(ws.path("models/classifier.model"));
    case Stage::segmenter: return load_model(ws.path("models/segmenter.model"));
    case Stage::generator: return load_model(ws.path("models/generator.model"));
    default: throw std::invalid_argument("stage " + to_string(s) + " has no model");
    }
}

GeneratorModel load_generator(const Workspace& ws)
{
    auto [ae, params] = load_stage_model(ws, Stage::generator);
    const ModelSpec dec = decoder_of(ae);
    return {dec, params_for(dec, params)};
}

LatentGaussian load_latent(const Workspace& ws)
{
    ws.require(Stage::generator);
    return LatentGaussian::from_json(ws.read_json("models/latent.json"));
}

Segmenter load_segmenter(const Workspace& ws)
{
    auto [m, p] = load_stage_model(ws, Stage::segmenter);
    return {m, p};
}

void run_gen_corpus(const Workspace& ws)
{
    begin_stage(ws, Stage::corpus);
    const CorpusManifest m = build_corpus(ws.config().corpus_config(), ws.path("corpus"));
    const SceneSet val = load_split(ws.path("corpus"), m, "val");
    std::vector<Tensor> samples;
    const int K = m.config.n_classes;
    for (int k = 0; k < K; ++k) {
        int shown = 0;
        for (int i = 0; i < val.size() && shown < 4; ++i)
            if (val.class_of(i) == k) {
                samples.push_back(val.image(i));
                ++shown;
            }
    }
    save_image(ws, "corpus/samples.png", image_grid(samples, 8));
    ws.write_json("corpus/summary.json", ws.stamp(Stage::corpus, {{"classes", m.class_names},
                                                                   {"train", m.train.size()},
                                                                   {"val", m.val.size()},
                                                                   {"corpus_hash", m.config_hash},
                                                                   {"catalog_hash", m.catalog_hash}}));
    ws.mark_complete(Stage::corpus);
}

void run_train_classifier(const Workspace& ws)
{
    begin_stage(ws, Stage::classifier);
    const SceneSet tr = load_corpus_split(ws, "train");
    const SceneSet va = load_corpus_split(ws, "val");
    const CorpusManifest m = load_manifest(ws.path("corpus"));
    const ModelSpec spec = classifier_spec(m.config.n_classes);
    const Tensor vx = va.images(0, va.size());
    nlohmann::json epochs = nlohmann::json::array();
    const SceneDataset data(tr, SceneTarget::class_id);
    const TrainResult r = train(spec, data, LossKind::cross_entropy,
                                ws.config().classifier.optimizer(ws.stage_seed("classifier")), std::nullopt,
                                [&](int e, double loss, const ParameterStore& p) {
                                    const double acc = accuracy(predict_classes(spec, p, vx), va.classes());
                                    epochs.push_back({{"epoch", e}, {"loss", loss}, {"val_accuracy", acc}});
                                    char buf[96];
                                    std::snprintf(buf, sizeof buf, "epoch %d loss %.4f val accuracy %.3f", e, loss, acc);
                                    ws.log(buf);
                                });
    fs::create_directories(ws.path("models"));
    save_model(ws.path("models/classifier.model"), spec, r.params);
    const double val_acc = accuracy(predict_classes(spec, r.params, vx), va.classes());
    const int n_check = std::min(tr.size(), 2000);
    const std::vector<int> tr_labels(tr.classes().begin(), tr.classes().begin() + n_check);
    const double train_acc = accuracy(predict_classes(spec, r.params, tr.images(0, n_check)), tr_labels);
    ws.write_json("models/classifier.json",
                  ws.stamp(Stage::classifier, {{"epochs", epochs},
                                               {"val_accuracy", val_acc},
                                               {"train_accuracy", train_acc},
                                               {"parameters", r.params.parameter_count()},
                                               {"model", to_json(spec)}}));
    ws.mark_complete(Stage::classifier);
}

void run_train_segmenter(const Workspace& ws)
{
    begin_stage(ws, Stage::segmenter);
    const SceneSet tr = load_corpus_split(ws, "train");
    const SceneSet va = load_corpus_split(ws, "val");
    SegmenterConfig sc;
    sc.optimizer = ws.config().segmenter.optimizer(ws.stage_seed("segmenter"));
    sc.background_scenes = ws.config().segmenter_background_scenes;
    nlohmann::json epochs = nlohmann::json::array();
    const TrainResult r = train_reference_segmenter(tr, sc, [&](int e, double loss, const ParameterStore&) {
        epochs.push_back({{"epoch", e}, {"loss", loss}});
        char buf[64];
        std::snprintf(buf, sizeof buf, "epoch %d loss %.4f", e, loss);
        ws.log(buf);
    });
    const ModelSpec spec = segmenter_spec();
    fs::create_directories(ws.path("models"));
    save_model(ws.path("models/segmenter.model"), spec, r.params);
    const SegmenterQuality q = evaluate_segmenter(spec, r.params, va);
    char buf[64];
    std::snprintf(buf, sizeof buf, "mean object IoU %.3f", q.mean_object_iou);
    ws.log(buf);
    ws.write_json("models/segmenter.json", ws.stamp(Stage::segmenter, {{"epochs", epochs},
                                                                       {"quality", q.to_json()},
                                                                       {"quality_floor", kSegmenterQualityFloor}}));
    ws.mark_complete(Stage::segmenter);
}

void run_train_generator(const Workspace& ws)
{
    begin_stage(ws, Stage::generator);
    const SceneSet tr = load_corpus_split(ws, "train");
    const SceneSet va = load_corpus_split(ws, "val");
    const ModelSpec ae = autoencoder_spec();
    nlohmann::json epochs = nlohmann::json::array();
    const SceneDataset data(tr, SceneTarget::image);
    const TrainResult r = train(ae, data, LossKind::mean_squared_error,
                                ws.config().generator.optimizer(ws.stage_seed("generator")), std::nullopt,
                                [&](int e, double loss, const ParameterStore&) {
                                    epochs.push_back({{"epoch", e}, {"loss", loss}});
                                    char buf[64];
                                    std::snprintf(buf, sizeof buf, "epoch %d loss %.5f", e, loss);
                                    ws.log(buf);
                                });
    fs::create_directories(ws.path("models"));
    save_model(ws.path("models/generator.model"), ae, r.params);

    const ModelSpec enc = encoder_of(ae);
    const ParameterStore ep = params_for(enc, r.params);
    Shape code_shape = enc.output_shape();
    Shape all{tr.size()};
    all.insert(all.end(), code_shape.begin(), code_shape.end());
    Tensor codes(all);
    const std::size_t item = shape_numel(code_shape);
    for (int b = 0; b < tr.size(); b += 64) {
        const int e = std::min(tr.size(), b + 64);
        const Tensor c = forward(enc, ep, tr.images(b, e)).output;
        std::copy(c.storage().begin(), c.storage().end(),
                  codes.storage().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(b) * item));
    }
    const LatentGaussian lg = LatentGaussian::fit(codes);
    ws.write_json("models/latent.json", lg.to_json());

    const Tensor recon = forward(ae, r.params, va.images(0, std::min(va.size(), 200))).output;
    const Tensor orig = va.images(0, std::min(va.size(), 200));
    double mse = 0.0;
    for (std::size_t k = 0; k < recon.size(); ++k) {
        const double d = std::clamp(recon[k], 0.0f, 1.0f) - orig[k];
        mse += d * d;
    }
    mse /= static_cast<double>(recon.size());

    const GeneratorModel gen{decoder_of(ae), params_for(decoder_of(ae), r.params)};
    const Tensor samples = generate(gen, lg.sample(16, ws.stage_seed("generator_samples")));
    std::vector<Tensor> tiles;
    for (int i = 0; i < 16; ++i) tiles.push_back(item_of(samples, i));
    save_image(ws, "models/generator_samples.png", image_grid(tiles, 8));
    ws.write_json("models/generator.json", ws.stamp(Stage::generator, {{"epochs", epochs},
                                                                       {"val_reconstruction_mse", mse},
                                                                       {"code_shape", code_shape},
                                                                       {"encodings", tr.size()}}));
    ws.mark_complete(Stage::generator);
}

void run_dissect_classifier(const Workspace& ws)
{
    begin_stage(ws, Stage::dissect_classifier);
    const auto& cfg = ws.config().dissect;
    const auto [spec, params] = load_stage_model(ws, Stage::classifier);
    const SceneSet tr = load_corpus_split(ws, "train");
    const SceneSet va = load_corpus_split(ws, "val");
    const ConceptCatalog& catalog = ConceptCatalog::standard();
    DissectConfig dc;
    dc.q = cfg.q;
    dc.min_iou = cfg.min_iou;
    dc.reservoir_capacity = cfg.reservoir_capacity;
    dc.seed = ws.stage_seed("dissect_classifier");
    const ThresholdTable th = fit_thresholds(spec, params, cfg.classifier_layers, inputs_of(tr), dc);
    ws.write_json("dissect/classifier/thresholds.json", th.to_json());

    nlohmann::json summaries = nlohmann::json::array();
    for (const auto& layer : cfg.classifier_layers) {
        ws.log("IoU for " + layer);
        const IoUTable iou = compute_iou_table(spec, params, layer, th, va, dc);
        ws.write_json("dissect/classifier/" + layer + ".iou.json", iou.to_json());
        write_text(ws.path("dissect/classifier/" + layer + ".iou.csv"), iou.to_csv());
        const auto labels = label_units(iou, cfg.min_iou, catalog);
        ws.write_json("dissect/classifier/" + layer + ".labels.json",
                      ws.stamp(Stage::dissect_classifier, {{"layer", layer}, {"labels", labels_json(labels, catalog)}}));
        nlohmann::json s = summarize_layer(layer, labels, catalog).to_json();

        nlohmann::json ex = nlohmann::json::array();
        for (const auto& l : best_labeled(labels, cfg.exemplar_units)) {
            const auto e = top_activating(spec, params, layer, l.unit, th.at(layer).t[static_cast<std::size_t>(l.unit)],
                                          inputs_of(va), cfg.exemplars);
            const std::string file = "dissect/classifier/" + layer + "_unit" + std::to_string(l.unit) + ".png";
            save_image(ws, file, exemplar_strip(e, [&](int i) { return va.image(i); }));
            ex.push_back({{"unit", l.unit}, {"concept", catalog.at(l.concept_id).name}, {"score", l.score},
                          {"image", file}});
        }
        s["exemplars"] = ex;
        summaries.push_back(s);
    }

    // Best last-layer unit per object concept as an image classifier.
    const std::string last = cfg.classifier_layers.back();
    const IoUTable last_iou = IoUTable::from_json(ws.read_json("dissect/classifier/" + last + ".iou.json"));
    const Tensor peaks = peak_activations(spec, params, last, inputs_of(va));
    nlohmann::json unit_cls = nlohmann::json::array();
    for (int c : catalog.ids_in(ConceptCategory::object)) {
        const int u = last_iou.rank_units(c).front();
        std::vector<float> pos, neg;
        for (int i = 0; i < va.size(); ++i) {
            const auto obj = va.seg(i).mask(c);
            const bool present = std::any_of(obj.begin(), obj.end(), [](std::uint8_t b) { return b != 0; });
            (present ? pos : neg).push_back(peaks[static_cast<std::size_t>(i) * last_iou.units + u]);
        }
        UnitClassifierResult r = evaluate_unit_classifier(pos, neg, th.at(last).t[static_cast<std::size_t>(u)]);
        nlohmann::json j = r.to_json();
        j.erase("positive_peaks");
        j.erase("negative_peaks");
        j["concept"] = catalog.at(c).name;
        j["unit"] = u;
        j["iou"] = last_iou.at(u, c);
        unit_cls.push_back(j);
    }
    ws.write_json("dissect/classifier/summary.json",
                  ws.stamp(Stage::dissect_classifier, {{"layers", summaries}, {"unit_classifiers", unit_cls}}));
    ws.mark_complete(Stage::dissect_classifier);
}

void run_dissect_generator(const Workspace& ws)
{
    begin_stage(ws, Stage::dissect_generator);
    const auto& cfg = ws.config().dissect;
    const auto seg_info = ws.read_json("models/segmenter.json");
    SegmenterQuality q;
    q.mean_object_iou = seg_info.at("quality").at("mean_object_iou").get<double>();
    require_segmenter_quality(q, cfg.allow_weak_segmenter);
    const GeneratorModel gen = load_generator(ws);
    const LatentGaussian lg = load_latent(ws);
    const Segmenter seg = load_segmenter(ws);
    const ConceptCatalog& catalog = ConceptCatalog::standard();
    const std::string layer = cfg.generator_layer;

    DissectConfig dc;
    dc.q = cfg.q;
    dc.min_iou = cfg.min_iou;
    dc.reservoir_capacity = cfg.reservoir_capacity;
    dc.seed = ws.stage_seed("dissect_generator");
    const Tensor fit = lg.sample(cfg.generator_fit_samples, ws.stage_seed("dissect_fit_latents"));
    const Tensor eval = lg.sample(cfg.generator_eval_samples, ws.stage_seed("dissect_eval_latents"));
    ws.log("fitting thresholds on generated images");
    const ThresholdTable th = fit_thresholds(gen.decoder, gen.params, {layer}, inputs_of(fit), dc);
    ws.write_json("dissect/generator/thresholds.json", th.to_json());
    ws.log("IoU for " + layer);
    const IoUAccumulator acc = accumulate_iou(gen.decoder, gen.params, layer, th, inputs_of(eval), segment_outputs(seg), dc);
    const IoUTable iou = IoUTable::from(acc, layer);
    ws.write_json("dissect/generator/" + layer + ".iou.json", iou.to_json());
    write_text(ws.path("dissect/generator/" + layer + ".iou.csv"), iou.to_csv());
    const auto labels = label_units(iou, cfg.min_iou, catalog);
    ws.write_json("dissect/generator/" + layer + ".labels.json",
                  ws.stamp(Stage::dissect_generator, {{"layer", layer}, {"labels", labels_json(labels, catalog)}}));
    nlohmann::json s = summarize_layer(layer, labels, catalog).to_json();

    nlohmann::json ex = nlohmann::json::array();
    for (const auto& l : best_labeled(labels, cfg.exemplar_units)) {
        const auto e = top_activating(gen.decoder, gen.params, layer, l.unit, th.at(layer).t[static_cast<std::size_t>(l.unit)],
                                      inputs_of(eval), cfg.exemplars);
        const std::string file = "dissect/generator/" + layer + "_unit" + std::to_string(l.unit) + ".png";
        save_image(ws, file, exemplar_strip(e, [&](int i) { return item_of(generate(gen, eval.slice(i, i + 1)), 0); }));
        ex.push_back({{"unit", l.unit}, {"concept", catalog.at(l.concept_id).name}, {"score", l.score}, {"image", file}});
    }
    s["exemplars"] = ex;
    ws.write_json("dissect/generator/summary.json",
                  ws.stamp(Stage::dissect_generator, {{"layers", nlohmann::json::array({s})},
                                                      {"segmenter_mean_object_iou", q.mean_object_iou}}));
    ws.mark_complete(Stage::dissect_generator);
}

void run_ablate(const Workspace& ws)
{
    begin_stage(ws, Stage::ablate);
    const auto& cfg = ws.config().ablate;
    const auto [spec, params] = load_stage_model(ws, Stage::classifier);
    const SceneSet tr = load_corpus_split(ws, "train");
    const SceneSet va = load_corpus_split(ws, "val");
    const CorpusManifest m = load_manifest(ws.path("corpus"));
    const int K = m.config.n_classes;
    const LabeledSplit trs = labeled(tr, "train"), vas = labeled(va, "val");
    const std::uint64_t seed = ws.stage_seed("ablate");

    ws.log("caching " + cfg.layer + " activations");
    const Tensor tr_cache = layer_activations(spec, params, cfg.layer, trs.inputs);
    const Tensor va_cache = layer_activations(spec, params, cfg.layer, vas.inputs);
    ws.log("ranking single-unit importance on train");
    const ImportanceTable imp = rank_unit_importance(spec, params, cfg.layer, trs, K, seed, &tr_cache);
    ws.write_json("intervene/importance.json", imp.to_json());
    write_text(ws.path("intervene/importance.csv"), imp.to_csv());

    std::vector<int> sizes;
    for (int k : cfg.curve_sizes)
        if (k <= imp.units) sizes.push_back(k);
    for (int k : {0, cfg.top_units, cfg.top_set})
        if (std::find(sizes.begin(), sizes.end(), k) == sizes.end()) sizes.push_back(k);
    std::sort(sizes.begin(), sizes.end());
    auto at_k = [&](const AblationCurve& c, int k) {
        for (const auto& p : c.points)
            if (p.k == k) return p;
        throw std::logic_error("curve lacks k");
    };

    nlohmann::json curves = nlohmann::json::array(), per_class = nlohmann::json::array();
    std::string curves_csv;
    std::vector<double> diffs;
    double top_set_single = 0.0, top_set_all = 0.0, base_all = 0.0;
    for (int k = 0; k < K; ++k) {
        ws.log("ablation curves for class " + m.class_names[static_cast<std::size_t>(k)]);
        const auto ranked = imp.ranked(k);
        const AblationCurve curve = ablation_curve(spec, params, cfg.layer, k, ranked, sizes, vas, seed, &va_cache);
        const auto rnd = random_units(imp.units, cfg.top_units, derive_seed(ws.stage_seed("ablate_random"), k));
        const AblationCurve rc = ablation_curve(spec, params, cfg.layer, k, rnd, std::vector<int>{cfg.top_units}, vas,
                                                seed, &va_cache);
        const double base = at_k(curve, 0).accuracy_removed;
        const double top = at_k(curve, cfg.top_units).accuracy_removed;
        const double random = rc.points.front().accuracy_removed;
        diffs.push_back((base - top) - (base - random));
        top_set_single += at_k(curve, cfg.top_set).accuracy_removed;
        top_set_all += at_k(curve, cfg.top_set).all_class_removed;
        base_all += at_k(curve, 0).all_class_removed;
        curves.push_back(curve.to_json());
        std::string csv = curve.to_csv();
        if (k > 0) csv.erase(0, csv.find('\n') + 1);
        curves_csv += csv;
        per_class.push_back({{"class", k},
                             {"name", m.class_names[static_cast<std::size_t>(k)]},
                             {"baseline", base},
                             {"top_units", std::vector<int>(ranked.begin(), ranked.begin() + cfg.top_units)},
                             {"accuracy_top_removed", top},
                             {"random_units", rnd},
                             {"accuracy_random_removed", random},
                             {"accuracy_top_set_removed", at_k(curve, cfg.top_set).accuracy_removed},
                             {"all_class_top_set_removed", at_k(curve, cfg.top_set).all_class_removed}});
    }
    ws.write_json("intervene/ablation_curves.json", ws.stamp(Stage::ablate, {{"curves", curves}}));
    write_text(ws.path("intervene/ablation_curves.csv"), curves_csv);

    const Interval ci = bootstrap_mean_ci(diffs, cfg.level, ws.stage_seed("ablate_bootstrap"));
    const Tensor peaks = peak_activations(spec, params, cfg.layer, vas.inputs);
    const CorrelationTable corr = unit_class_correlation(peaks, vas.labels, K);
    int positive = 0, total = 0;
    for (int k = 0; k < K; ++k) {
        const auto ranked = imp.ranked(k);
        for (int i = 0; i < cfg.top_units; ++i) {
            positive += corr.at(ranked[static_cast<std::size_t>(i)], k) > 0.0;
            ++total;
        }
    }
    ws.write_json("intervene/correlation.json", ws.stamp(Stage::ablate, corr.to_json()));
    ws.write_json("intervene/causal_summary.json",
                  ws.stamp(Stage::ablate, {{"layer", cfg.layer},
                                           {"top_units", cfg.top_units},
                                           {"top_set", cfg.top_set},
                                           {"per_class", per_class},
                                           {"top_minus_random", ci.to_json()},
                                           {"difference_per_class", diffs},
                                           {"mean_single_class_top_set_removed", top_set_single / K},
                                           {"mean_all_class_baseline", base_all / K},
                                           {"mean_all_class_top_set_removed", top_set_all / K},
                                           {"top_units_positively_correlated", positive},
                                           {"top_units_total", total},
                                           {"nonzero_importance_deltas",
                                            std::count_if(imp.delta.begin(), imp.delta.end(),
                                                          [](double d) { return d != 0.0; })}}));
    ws.mark_complete(Stage::ablate);
}

void run_intervene_gen(const Workspace& ws)
{
    begin_stage(ws, Stage::intervene_gen);
    const auto& cfg = ws.config().intervene;
    const std::string layer = ws.config().dissect.generator_layer;
    const GeneratorModel gen = load_generator(ws);
    const LatentGaussian lg = load_latent(ws);
    const Segmenter seg = load_segmenter(ws);
    const ConceptCatalog& catalog = ConceptCatalog::standard();
    const IoUTable iou = IoUTable::from_json(ws.read_json("dissect/generator/" + layer + ".iou.json"));
    const ThresholdTable th = ThresholdTable::from_json(ws.read_json("dissect/generator/thresholds.json"));

    const Tensor latents = lg.sample(cfg.removal_samples, ws.stage_seed("removal_latents"));
    ws.log("segmenting baseline generated images");
    std::map<int, std::uint64_t> pixels;
    const auto objects = catalog.ids_in(ConceptCategory::object);
    for (int b = 0; b < latents.dim(0); b += 32) {
        const int e = std::min(latents.dim(0), b + 32);
        for (const auto& s : segment_images(seg.model, seg.params, generate(gen, latents.slice(b, e))))
            for (int c : objects) {
                const auto mk = s.mask(c);
                pixels[c] += static_cast<std::uint64_t>(std::count(mk.begin(), mk.end(), 1));
            }
    }
    int dominant = objects.front();
    for (int c : objects)
        if (pixels[c] > pixels[dominant]) dominant = c;
    ws.log("dominant object concept: " + catalog.at(dominant).name);

    const RemovalResult top = measure_concept_removal(gen, seg, iou, dominant, cfg.units, latents, cfg.keep_pairs);
    const auto rnd = random_units(iou.units, cfg.units, ws.stage_seed("removal_random"));
    const RemovalResult random = measure_unit_removal(gen, seg, layer, dominant, rnd, latents, 0);
    std::vector<Tensor> rows;
    for (const auto& [before, after] : top.pairs) rows.push_back(hconcat(std::vector<Tensor>{before, after}));
    if (!rows.empty()) save_image(ws, "intervene/removal_pairs.png", image_grid(rows, 4));

    ws.log("context map");
    const Tensor ctx = lg.sample(cfg.context_samples, ws.stage_seed("context_latents"));
    auto ranked = iou.rank_units(dominant);
    ranked.resize(static_cast<std::size_t>(cfg.units));
    ContextMapConfig cc;
    cc.success_pixels = cfg.success_pixels;
    const ContextMap map = context_map(gen, seg, layer, ranked, dominant, th.at(layer), ctx, cc);
    const auto null = location_permutation_null(map, cfg.permutations, ws.stage_seed("context_null"));
    const double p95 = quantile(null, 0.95);
    const double var = map.map_variance();
    const auto p_value = static_cast<double>(1 + std::count_if(null.begin(), null.end(), [&](double v) { return v >= var; })) /
                         static_cast<double>(null.size() + 1);
    save_image(ws, "intervene/context_map.png", heatmap(map.mean_new_pixels, map.height, map.width, 16));
    nlohmann::json mj = map.to_json();
    mj.erase("per_sample");
    ws.write_json("intervene/context_map.json",
                  ws.stamp(Stage::intervene_gen, {{"map", mj},
                                                  {"variance", var},
                                                  {"null_p95", p95},
                                                  {"null_mean", mean_of(null)},
                                                  {"permutations", cfg.permutations},
                                                  {"p_value", p_value}}));

    nlohmann::json base_pixels;
    for (int c : objects) base_pixels[catalog.at(c).name] = pixels[c];
    nlohmann::json tj = top.to_json(), rj = random.to_json();
    ws.write_json("intervene/generator_summary.json",
                  ws.stamp(Stage::intervene_gen, {{"layer", layer},
                                                  {"dominant_concept", dominant},
                                                  {"dominant_name", catalog.at(dominant).name},
                                                  {"baseline_object_pixels", base_pixels},
                                                  {"top_removal", tj},
                                                  {"random_removal", rj}}));
    ws.mark_complete(Stage::intervene_gen);
}

void run_attack(const Workspace& ws)
{
    begin_stage(ws, Stage::attack);
    ws.require(Stage::classifier);
    const auto& cfg = ws.config().attack;
    const auto [spec, params] = load_stage_model(ws, Stage::classifier);
    const SceneSet va = load_corpus_split(ws, "val");
    const CorpusManifest m = load_manifest(ws.path("corpus"));
    const ImportanceTable imp = ImportanceTable::from_json(ws.read_json("intervene/importance.json"));

    const auto pred = predict_classes(spec, params, va.images(0, va.size()));
    std::vector<int> chosen;
    for (int i = 0; i < va.size() && static_cast<int>(chosen.size()) < cfg.images; ++i)
        if (pred[static_cast<std::size_t>(i)] == va.class_of(i)) chosen.push_back(i);
    std::vector<int> sources;
    for (int i : chosen) sources.push_back(va.class_of(i));
    const auto targets = choose_targets(sources, m.config.n_classes, ws.stage_seed("attack_targets"));
    std::vector<int> units(static_cast<std::size_t>(imp.units));
    std::iota(units.begin(), units.end(), 0);

    ws.log("attacking " + std::to_string(chosen.size()) + " images");
    std::vector<AttackResult> results(chosen.size());
    const int jobs = num_jobs();
    set_num_jobs(1);
    parallel_for(chosen.size(), jobs, [&](std::size_t a) {
        AttackConfig ac;
        ac.target = targets[a];
        ac.step = cfg.step;
        ac.iterations = cfg.iterations;
        ac.linf_bound = cfg.linf_bound;
        ac.l2_weight = cfg.l2_weight;
        ac.margin = cfg.margin;
        ac.seed = derive_seed(ws.stage_seed("attack"), static_cast<std::uint64_t>(a));
        const Tensor img = va.image(chosen[a]);
        AttackResult r = targeted_attack(spec, params, img, sources[a], ac);
        r.unit_deltas = unit_delta_report(spec, params, img, r.adversarial, imp.layer, units);
        results[a] = std::move(r);
    });
    set_num_jobs(jobs);

    int successes = 0;
    double l2 = 0.0, linf = 0.0;
    nlohmann::json per = nlohmann::json::array();
    int drawn = 0;
    for (std::size_t a = 0; a < results.size(); ++a) {
        const auto& r = results[a];
        successes += r.success;
        l2 += r.l2;
        linf = std::max(linf, r.linf);
        nlohmann::json j = r.to_json();
        j["image"] = chosen[a];
        if (r.success && drawn < cfg.triptychs) {
            const std::string file = "attack/triptych_" + std::to_string(drawn++) + ".png";
            save_image(ws, file, upscale_nearest(triptych(va.image(chosen[a]), r.adversarial), 2));
            j["triptych"] = file;
        }
        per.push_back(j);
    }
    const auto summary = aggregate_importance_delta(results, imp, default_rank_buckets(), cfg.random_units, cfg.level,
                                                    ws.stage_seed("attack_buckets"));
    const double n = static_cast<double>(std::max<std::size_t>(1, results.size()));
    ws.write_json("attack/attacks.json", ws.stamp(Stage::attack, {{"attacks", per}}));
    nlohmann::json sj = summary.to_json();
    ws.write_json("attack/summary.json", ws.stamp(Stage::attack, {{"images", results.size()},
                                                                  {"successes", successes},
                                                                  {"success_rate", successes / n},
                                                                  {"mean_l2", l2 / n},
                                                                  {"max_linf", linf},
                                                                  {"linf_bound", cfg.linf_bound},
                                                                  {"importance", sj}}));
    ws.mark_complete(Stage::attack);
}

std::vector<std::pair<std::string, Stage>> report_inputs()
{
    return {
        {"corpus/summary.json", Stage::corpus},
        {"corpus/samples.png", Stage::corpus},
        {"models/classifier.json", Stage::classifier},
        {"models/segmenter.json", Stage::segmenter},
        {"models/generator.json", Stage::generator},
        {"models/generator_samples.png", Stage::generator},
        {"dissect/classifier/summary.json", Stage::dissect_classifier},
        {"dissect/generator/summary.json", Stage::dissect_generator},
        {"intervene/causal_summary.json", Stage::ablate},
        {"intervene/ablation_curves.json", Stage::ablate},
        {"intervene/generator_summary.json", Stage::intervene_gen},
        {"intervene/context_map.json", Stage::intervene_gen},
        {"intervene/context_map.png", Stage::intervene_gen},
        {"attack/summary.json", Stage::attack},
        {"attack/attacks.json", Stage::attack},
    };
}

void run_report(const Workspace& ws)
{
    std::string missing;
    for (const auto& [file, stage] : report_inputs())
        if (!fs::exists(ws.path(file))) missing += "\n  " + file + " (run `unitscope " + command_for(stage) + "`)";
    if (!missing.empty()) throw PreconditionError("report is missing artifacts:" + missing);
    for (const auto& [file, stage] : report_inputs()) ws.require(stage);
    render_report(ws);
}

void run_stage(const Workspace& ws, Stage s)
{
    switch (s) {
    case Stage::corpus: return run_gen_corpus(ws);
    case Stage::classifier: return run_train_classifier(ws);
    case Stage::segmenter: return run_train_segmenter(ws);
    case Stage::generator: return run_train_generator(ws);
    case Stage::dissect_classifier: return run_dissect_classifier(ws);
    case Stage::dissect_generator: return run_dissect_generator(ws);
    case Stage::ablate: return run_ablate(ws);
    case Stage::intervene_gen: return run_intervene_gen(ws);
    case Stage::attack: return run_attack(ws);
    }
}

void ensure_stage(const Workspace& ws, Stage s)
{
    for (Stage in : stage_inputs(s)) ensure_stage(ws, in);
    if (!ws.up_to_date(s)) run_stage(ws, s);
}

PaintEngine make_paint_engine(const Workspace& ws)
{
    ws.require(Stage::dissect_generator);
    const std::string layer = ws.config().dissect.generator_layer;
    const IoUTable iou = IoUTable::from_json(ws.read_json("dissect/generator/" + layer + ".iou.json"));
    const ThresholdTable th = ThresholdTable::from_json(ws.read_json("dissect/generator/thresholds.json"));
    return PaintEngine(load_generator(ws), load_latent(ws),
                       ConceptPalette::build(iou, th.at(layer), ws.config().serve.palette_units));
}

} // namespace unitscope
