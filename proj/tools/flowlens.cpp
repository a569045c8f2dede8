// Copyright 2026 The flowlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// flowlens command-line entry point.
//
//   flowlens synth    --out DIR                   synthetic capture + sidecars
//   flowlens build    --out DIR [--labels F] PCAP...
//   flowlens pretrain --out DIR --data DIR
//   flowlens finetune --out DIR --data DIR [--checkpoint F]
//   flowlens eval     --out DIR --data DIR --checkpoint F [--reference DIR]
//   flowlens matrix   --out DIR --data DIR --data DIR ...
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowlens/flowlens.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flowlens;

namespace {

constexpr const char* kSequencesFile = "sequences.flsq";
constexpr const char* kNetflowFile = "netflow.flnf";
constexpr const char* kCheckpointFile = "checkpoint.flck";

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Telemetry (stderr only)

class Telemetry {
public:
    void log(const std::string& stage, const std::string& msg) const {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::fprintf(stderr, "[flowlens %8.1fs] %s: %s\n", s, stage.c_str(), msg.c_str());
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

const Telemetry& telemetry() {
    static Telemetry t;
    return t;
}

// ---------------------------------------------------------------------------
// Run directory: tracks what this run created so a failed run leaves nothing
// half-written behind.

class RunDir {
public:
    explicit RunDir(fs::path dir) : dir_(std::move(dir)) {
        created_dir_ = !fs::exists(dir_);
        fs::create_directories(dir_);
    }

    [[nodiscard]] fs::path file(const std::string& name) {
        auto p = dir_ / name;
        if (!fs::exists(p)) {
            created_.push_back(p);
        }
        return p;
    }

    void write_text(const std::string& name, const std::string& text) {
        std::ofstream os(file(name), std::ios::trunc);
        os << text;
        if (!os) {
            throw std::runtime_error("cannot write " + (dir_ / name).string());
        }
    }

    void write_json(const std::string& name, const json& j) { write_text(name, j.dump(2) + "\n"); }

    void rollback() noexcept {
        std::error_code ec;
        for (const auto& p : created_) {
            fs::remove(p, ec);
        }
        if (created_dir_) {
            fs::remove(dir_, ec);  // only if empty
        }
    }

    [[nodiscard]] const fs::path& path() const { return dir_; }

private:
    fs::path dir_;
    bool created_dir_ = false;
    std::vector<fs::path> created_;
};

// ---------------------------------------------------------------------------
// Options shared by the training subcommands

struct GlobalOptions {
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool deterministic = false;
    std::string precision = "f32";
    std::string out;
};

struct TrainingOptions {
    ExperimentConfig exp;
    std::string model = "transformer";
    std::vector<std::string> data;
    std::string checkpoint;
    std::string reference;
    std::string mode = "auto";
    std::vector<std::string> models = {"transformer", "dnn"};
};

void add_experiment_options(CLI::App* sub, ExperimentConfig& e) {
    auto& m = e.model;
    auto& t = e.train;
    auto& s = e.split;
    sub->add_option("--layers", m.n_layers, "Transformer blocks")->capture_default_str();
    sub->add_option("--d-model", m.d_model, "Transformer width")->capture_default_str();
    sub->add_option("--heads", m.n_heads, "Attention heads")->capture_default_str();
    sub->add_option("--d-header", m.d_header, "Per-channel header embedding width")->capture_default_str();
    sub->add_option("--ff-width", m.ff_width, "Feed-forward width")->capture_default_str();
    sub->add_option("--dropout", m.dropout, "Dropout probability")->capture_default_str();
    sub->add_option("--dnn-layers", e.dnn.n_layers, "Baseline DNN layers")->capture_default_str();
    sub->add_option("--dnn-width", e.dnn.width, "Baseline DNN width")->capture_default_str();
    sub->add_option("--batch-size", t.batch_size, "Contrastive batch size")->capture_default_str();
    sub->add_option("--epochs", t.pretrain_epochs, "Pretraining epochs")->capture_default_str();
    sub->add_option("--lr", t.lr, "Pretraining learning rate")->capture_default_str();
    sub->add_option("--lambda", t.lambda, "Augmentation ratio")->capture_default_str();
    sub->add_option("--temperature", t.temperature, "NT-Xent temperature")->capture_default_str();
    sub->add_option("--weight-decay", t.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    sub->add_option("--finetune-lr", t.finetune_lr, "Fine-tuning learning rate")->capture_default_str();
    sub->add_option("--finetune-batch-size", t.finetune_batch_size, "Fine-tuning batch size")->capture_default_str();
    sub->add_option("--max-epochs", t.finetune_max_epochs, "Fine-tuning epoch limit")->capture_default_str();
    sub->add_option("--patience", t.patience, "Early-stopping patience")->capture_default_str();
    sub->add_option("--pretrain-fraction", s.pretrain_benign_fraction, "Benign share used for pretraining")
        ->capture_default_str();
    sub->add_option("--supervised-fraction", s.supervised_malicious_fraction,
                    "Malicious share in the supervised pool")
        ->capture_default_str();
    sub->add_option("--fewshot-fraction", s.fewshot_fraction, "Labeled share for few-shot fine-tuning")
        ->capture_default_str();
    sub->add_option("--pretrain-cap", e.pretrain_cap, "Max pretraining flows (0 = all)")->capture_default_str();
    sub->add_option("--test-cap", e.test_cap, "Max test flows (0 = all)")->capture_default_str();
    sub->add_option("--reference-cap", e.reference_cap, "Max reference vectors for similarity scoring")
        ->capture_default_str();
}

void validate_experiment(const ExperimentConfig& e) {
    try {
        e.model.validate();
        e.dnn.validate();
        e.train.validate();
        e.split.validate();
    } catch (const std::invalid_argument& ex) {
        throw UsageError(ex.what());
    }
}

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) {
        throw UsageError("missing " + what + ": " + p.string());
    }
}

void require_dataset(const fs::path& dir) {
    require_file(dir / kSequencesFile, "packet-sequence dataset (run `flowlens build` first)");
    require_file(dir / kNetflowFile, "NetFlow dataset (run `flowlens build` first)");
}

Dataset load_dataset(const fs::path& dir) {
    telemetry().log("load", dir.string());
    return make_dataset(load_sequences(dir / kSequencesFile), load_netflow(dir / kNetflowFile));
}

json dataset_fingerprint(const fs::path& dir) {
    return {{"path", dir.string()},
            {"sequences_hash", file_hash(dir / kSequencesFile)},
            {"netflow_hash", file_hash(dir / kNetflowFile)}};
}

json run_header(const std::string& command, const GlobalOptions& g, const ExperimentConfig* exp) {
    json j = {{"command", command},
              {"seed", g.seed},
              {"deterministic", g.deterministic},
              {"precision", g.precision},
              {"version", 1}};
    if (exp) {
        j["experiment"] = exp->to_json();
        j["config_hash"] = hex64(fnv1a(exp->to_json().dump()));
    }
    return j;
}

std::string loss_csv(const std::vector<double>& losses) {
    std::ostringstream os;
    os << std::setprecision(17) << "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) {
        os << i + 1 << ',' << losses[i] << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints carry their model description in the metadata block.

template <class Model>
json model_metadata(const Model& model, const ExperimentConfig& e, const std::string& stage) {
    json j = {{"stage", stage}};
    if constexpr (std::is_same_v<typename Model::Item, TokenizedSequence>) {
        j["kind"] = "transformer";
        j["model"] = e.model.to_json();
    } else {
        j["kind"] = "dnn";
        j["dnn"] = e.dnn.to_json();
        j["normalization"] = model.encoder.normalization().to_json();
    }
    j["proj_hidden"] = model.projection.hidden.out_features();
    j["proj_dim"] = model.projection.output.out_features();
    j["cls_hidden"] = model.classifier.hidden.out_features();
    return j;
}

template <class Model>
void save_model(const fs::path& path, const Model& model, const ExperimentConfig& e, const std::string& stage,
                const Rng& rng) {
    save_checkpoint(path, model.named_parameters(), rng, model_metadata(model, e, stage).dump());
}

struct LoadedMeta {
    ModelKind kind;
    json meta;
    Checkpoint ck;
};

LoadedMeta read_checkpoint(const fs::path& path) {
    require_file(path, "checkpoint");
    LoadedMeta m{ModelKind::kTransformer, {}, load_checkpoint(path)};
    m.meta = json::parse(m.ck.metadata);
    m.kind = parse_model_kind(m.meta.at("kind").get<std::string>());
    return m;
}

/// Rebuilds the architecture recorded in the checkpoint (overriding the
/// corresponding parts of `e`) and loads its weights.
template <class Model>
Model restore_model(const LoadedMeta& m, ExperimentConfig& e) {
    if constexpr (std::is_same_v<typename Model::Item, TokenizedSequence>) {
        e.model = ModelConfig::from_json(m.meta.at("model"));
    } else {
        e.dnn = DnnConfig::from_json(m.meta.at("dnn"));
    }
    Rng scratch(0);
    auto model = new_model<Model>(e, scratch);
    if constexpr (!std::is_same_v<typename Model::Item, TokenizedSequence>) {
        model.encoder.set_normalization(ZScore::from_json(m.meta.at("normalization")));
    }
    auto params = model.named_parameters();
    restore_parameters(m.ck, params);
    return model;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const GlobalOptions& g, TrafficProfile profile, RunDir& run) {
    profile.seed = g.seed;
    try {
        profile.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    telemetry().log("synth", std::to_string(profile.flows) + " flows");
    const auto cap = generate(profile);
    for (const char* f : {"capture.pcap", "manifest.jsonl", "labels.json"}) {
        (void)run.file(f);
    }
    write_synth(cap, run.path());
    json cfg = run_header("synth", g, nullptr);
    cfg["profile"] = profile.to_json();
    run.write_json("config.json", cfg);
    telemetry().log("synth", std::to_string(cap.packet_count) + " packets written");
    return 0;
}

int cmd_build(const GlobalOptions& g, const std::vector<std::string>& pcaps, const std::string& labels_path,
              const AssemblyOptions& opts, bool jsonl, RunDir& run) {
    if (pcaps.empty()) {
        throw UsageError("build: no capture files given");
    }
    for (const auto& p : pcaps) {
        require_file(p, "capture");
    }
    std::optional<LabelRules> rules;
    if (!labels_path.empty()) {
        require_file(labels_path, "label sidecar");
        rules = LabelRules::load(labels_path);
    }
    std::vector<ParsedCapture> caps;
    json inputs = json::array();
    for (const auto& p : pcaps) {
        try {
            caps.push_back(parse_pcap_file(p));
        } catch (const std::exception& e) {
            throw std::runtime_error("failed to parse " + p + ": " + e.what());
        }
        const auto& st = caps.back().stats;
        telemetry().log("build", p + ": " + std::to_string(st.records) + " records, " +
                                     std::to_string(st.ip_packets) + " IP packets, " + std::to_string(st.skipped()) +
                                     " skipped");
        for (const auto& w : st.warnings) {
            telemetry().log("build", p + ": warning: " + w);
        }
        inputs.push_back({{"path", p}, {"hash", file_hash(p)}, {"records", st.records}, {"ip_packets", st.ip_packets}});
    }
    const auto corpus = build_corpus(caps, rules ? &*rules : nullptr, opts);
    save_sequences(run.file(kSequencesFile), corpus.flows);
    save_netflow(run.file(kNetflowFile), corpus.netflow);
    {
        std::ofstream os(run.file("netflow.csv"), std::ios::trunc);
        write_netflow_csv(os, corpus.netflow);
    }
    if (jsonl) {
        std::ofstream os(run.file("sequences.jsonl"), std::ios::trunc);
        write_sequences_jsonl(os, corpus.flows);
    }
    std::size_t labeled = 0, malicious = 0;
    for (const auto& f : corpus.flows) {
        labeled += f.label.has_value();
        malicious += f.label && *f.label == Label::kMalicious;
    }
    json cfg = run_header("build", g, nullptr);
    cfg["assembly"] = {{"timeout_us", opts.timeout_us},
                       {"max_packets", opts.max_packets},
                       {"max_active_flows", opts.max_active_flows},
                       {"close_on_fin_rst", opts.close_on_fin_rst}};
    cfg["inputs"] = inputs;
    if (!labels_path.empty()) {
        cfg["labels"] = {{"path", labels_path}, {"hash", file_hash(labels_path)}};
    }
    cfg["config_hash"] = hex64(fnv1a(cfg["assembly"].dump()));
    run.write_json("config.json", cfg);
    json manifest = {
        {"flows", corpus.flows.size()},
        {"netflow_rows", corpus.netflow.size()},
        {"labeled", labeled},
        {"malicious", malicious},
        {"packets", corpus.assembly.packets},
        {"packets_in_sequences", corpus.assembly.packets_in_sequences},
        {"packets_dropped_after_cap", corpus.assembly.packets_dropped_after_cap},
        {"evicted", corpus.assembly.evicted},
        {"skipped_non_ip", corpus.capture.skipped_non_ip},
        {"skipped_short", corpus.capture.skipped_short},
        {"degraded_tcp", corpus.capture.degraded_tcp},
        {"sequences_hash", file_hash(run.path() / kSequencesFile)},
        {"netflow_hash", file_hash(run.path() / kNetflowFile)},
        {"config_hash", cfg["config_hash"]},
    };
    run.write_json("manifest.json", manifest);
    telemetry().log("build", std::to_string(corpus.flows.size()) + " flows (" + std::to_string(malicious) +
                                 " malicious)");
    return 0;
}

template <class Model>
int cmd_pretrain(const GlobalOptions& g, TrainingOptions& o, RunDir& run) {
    const fs::path data_dir = o.data.at(0);
    const auto d = load_dataset(data_dir);
    const auto splits = protocol_splits(d, o.exp);
    json cfg = run_header("pretrain", g, &o.exp);
    cfg["model_kind"] = o.model;
    cfg["data"] = dataset_fingerprint(data_dir);
    run.write_json("config.json", cfg);
    telemetry().log("pretrain", o.model + " on " + std::to_string(splits.pretrain.size()) + " benign flows");
    Rng rng(g.seed, 0x9e7);
    PretrainReport rep;
    std::size_t last_pct = 0;
    auto on_step = [&](std::size_t step, std::size_t total, double loss) {
        const std::size_t pct = total ? 10 * step / total : 10;
        if (pct != last_pct || step == total) {
            last_pct = pct;
            telemetry().log("pretrain", "step " + std::to_string(step) + "/" + std::to_string(total) + " loss " +
                                            std::to_string(loss));
        }
    };
    const auto model = pretrained_model<Model>(d, splits, o.exp, rng, &rep, on_step);
    save_model(run.file(kCheckpointFile), model, o.exp, "pretrain", rng);
    run.write_text("loss.csv", loss_csv(rep.losses));
    const double final_loss = rep.losses.empty() ? 0.0 : rep.losses.back();
    run.write_json("metrics.json", {{"steps", rep.steps},
                                    {"samples", rep.samples},
                                    {"skipped_steps", rep.skipped_steps},
                                    {"fallback_pairs", rep.fallback_pairs},
                                    {"final_loss", final_loss},
                                    {"checkpoint_hash", file_hash(run.path() / kCheckpointFile)}});
    return 0;
}

template <class Model>
int cmd_finetune(const GlobalOptions& g, TrainingOptions& o, RunDir& run) {
    const fs::path data_dir = o.data.at(0);
    std::optional<LoadedMeta> meta;
    if (!o.checkpoint.empty()) {
        meta = read_checkpoint(o.checkpoint);
    }
    const auto d = load_dataset(data_dir);
    const auto splits = protocol_splits(d, o.exp);
    Rng rng(g.seed, 0xf17);
    Rng init_rng = rng.split(1);
    auto model = meta ? restore_model<Model>(*meta, o.exp) : new_model<Model>(o.exp, init_rng);
    json cfg = run_header("finetune", g, &o.exp);
    cfg["model_kind"] = o.model;
    cfg["data"] = dataset_fingerprint(data_dir);
    cfg["init"] = meta ? json{{"checkpoint", o.checkpoint}, {"hash", file_hash(o.checkpoint)}} : json("random");
    run.write_json("config.json", cfg);

    using Item = typename Model::Item;
    Rng pick = rng.split(2);
    Rng train_rng = rng.split(3);
    const auto labeled_idx = fewshot_sample(splits.supervised, d.labels, o.exp.split.fewshot_fraction, d.size(), pick);
    const auto& all = items_of<Item>(d);
    const auto labeled = gather(std::span<const Item>(all), std::span<const std::size_t>(labeled_idx));
    const auto labeled_y = gather(std::span<const std::int32_t>(d.labels), std::span<const std::size_t>(labeled_idx));
    telemetry().log("finetune", o.model + " on " + std::to_string(labeled.size()) + " labeled flows");
    auto on_epoch = [&](std::size_t epoch, std::size_t total, double err) {
        telemetry().log("finetune", "epoch " + std::to_string(epoch) + "/" + std::to_string(total) +
                                        " validation error " + std::to_string(err));
    };
    FinetuneReport rep;
    if constexpr (std::is_same_v<Item, TokenizedSequence>) {
        rep = finetune(model, std::span<const Item>(labeled), labeled_y, o.exp.train, train_rng, on_epoch);
    } else {
        rep = finetune_baseline(model, std::span<const Item>(labeled), labeled_y, o.exp.train, train_rng,
                                !meta.has_value(), on_epoch);
    }
    const auto test = gather(std::span<const Item>(all), std::span<const std::size_t>(splits.test));
    const auto test_y = gather(std::span<const std::int32_t>(d.labels), std::span<const std::size_t>(splits.test));
    const auto p = predict_malicious(model, std::span<const Item>(test));
    const auto auc = auc_roc(p, test_y);
    save_model(run.file(kCheckpointFile), model, o.exp, "finetune", train_rng);
    {
        std::ostringstream os;
        os << std::setprecision(17) << "epoch,train_loss,validation_error\n";
        for (std::size_t i = 0; i < rep.train_loss.size(); ++i) {
            os << i + 1 << ',' << rep.train_loss[i] << ',' << rep.validation_error[i] << '\n';
        }
        run.write_text("loss.csv", os.str());
    }
    run.write_text("roc.csv", auc.roc_csv());
    json metrics = auc.to_json();
    metrics["labeled"] = labeled.size();
    metrics["best_epoch"] = rep.best_epoch;
    metrics["epochs_run"] = rep.epochs_run;
    metrics["early_stopped"] = rep.early_stopped;
    metrics["checkpoint_hash"] = file_hash(run.path() / kCheckpointFile);
    run.write_json("metrics.json", metrics);
    telemetry().log("finetune", "test AUC " + std::to_string(auc.auc));
    return 0;
}

template <class Model>
int cmd_eval(const GlobalOptions& g, TrainingOptions& o, const LoadedMeta& meta, RunDir& run) {
    const fs::path data_dir = o.data.at(0);
    const fs::path ref_dir = o.reference.empty() ? data_dir : fs::path(o.reference);
    auto model = restore_model<Model>(meta, o.exp);
    std::string mode = o.mode;
    if (mode == "auto") {
        mode = meta.meta.value("stage", "pretrain") == "finetune" ? "classifier" : "unsupervised";
    }
    const auto target = load_dataset(data_dir);
    const auto target_splits = protocol_splits(target, o.exp);
    json cfg = run_header("eval", g, &o.exp);
    cfg["mode"] = mode;
    cfg["data"] = dataset_fingerprint(data_dir);
    cfg["checkpoint"] = {{"path", o.checkpoint}, {"hash", file_hash(o.checkpoint)}};
    AUCResult auc;
    std::vector<double> scores;
    if (mode == "unsupervised") {
        const auto ref = ref_dir == data_dir ? Dataset{} : load_dataset(ref_dir);
        const Dataset& reference = ref_dir == data_dir ? target : ref;
        const auto ref_splits = protocol_splits(reference, o.exp);
        cfg["reference"] = dataset_fingerprint(ref_dir);
        run.write_json("config.json", cfg);
        telemetry().log("eval", "unsupervised: " + std::to_string(target_splits.test.size()) + " test flows");
        auc = unsupervised_auc(model, reference, ref_splits, target, target_splits, o.exp, &scores);
    } else if (mode == "classifier") {
        run.write_json("config.json", cfg);
        using Item = typename Model::Item;
        const auto test = gather(std::span<const Item>(items_of<Item>(target)),
                                 std::span<const std::size_t>(target_splits.test));
        const auto y = gather(std::span<const std::int32_t>(target.labels),
                              std::span<const std::size_t>(target_splits.test));
        scores = predict_malicious(model, std::span<const Item>(test));
        auc = auc_roc(scores, y);
    } else {
        throw UsageError("eval: unknown mode '" + mode + "' (expected auto, unsupervised or classifier)");
    }
    run.write_text("roc.csv", auc.roc_csv());
    {
        std::ostringstream os;
        os << std::setprecision(17) << "index,label,score\n";
        for (std::size_t i = 0; i < scores.size(); ++i) {
            os << target_splits.test[i] << ',' << target.labels[target_splits.test[i]] << ',' << scores[i] << '\n';
        }
        run.write_text("scores.csv", os.str());
    }
    json metrics = auc.to_json();
    metrics["mode"] = mode;
    run.write_json("metrics.json", metrics);
    telemetry().log("eval", "AUC " + std::to_string(auc.auc));
    return 0;
}

template <class T>
int cmd_matrix(const GlobalOptions& g, TrainingOptions& o, RunDir& run) {
    std::vector<std::string> names;
    std::vector<Dataset> data;
    json cfg = run_header("matrix", g, &o.exp);
    cfg["data"] = json::array();
    for (const auto& spec : o.data) {
        std::string name, path = spec;
        if (const auto eq = spec.find('='); eq != std::string::npos) {
            name = spec.substr(0, eq);
            path = spec.substr(eq + 1);
        } else {
            name = fs::path(spec).filename().string();
            if (name.empty()) {
                name = fs::path(spec).parent_path().filename().string();
            }
        }
        names.push_back(name);
        cfg["data"].push_back(dataset_fingerprint(path));
        cfg["data"].back()["name"] = name;
        data.push_back(load_dataset(path));
    }
    cfg["models"] = o.models;
    run.write_json("config.json", cfg);
    std::vector<NamedDataset> nds;
    for (std::size_t i = 0; i < data.size(); ++i) {
        nds.push_back({names[i], &data[i]});
    }
    json metrics = json::object();
    auto progress = [](const std::string& stage, const std::string& msg) { telemetry().log(stage, msg); };
    for (const auto& m : o.models) {
        const auto kind = parse_model_kind(m);
        MatrixResult res = kind == ModelKind::kTransformer
                               ? run_matrix<TransformerModel<T>>(nds, o.exp, g.seed, progress)
                               : run_matrix<DnnModel<T>>(nds, o.exp, g.seed, progress);
        for (const auto& t : res.tables) {
            run.write_text(t.title + ".csv", t.to_csv());
            json tj = json::object();
            for (std::size_t r = 0; r < t.rows.size(); ++r) {
                for (std::size_t c = 0; c < t.columns.size(); ++c) {
                    tj[t.rows[r]][t.columns[c]] = t.values[r][c] ? json(*t.values[r][c]) : json(nullptr);
                }
            }
            metrics["tables"][t.title] = tj;
        }
        metrics["details"][m] = res.metrics;
    }
    run.write_json("metrics.json", metrics);
    return 0;
}

template <class T>
int dispatch_model(const std::string& cmd, const GlobalOptions& g, TrainingOptions& o, RunDir& run) {
    ModelKind kind = parse_model_kind(o.model);
    std::optional<LoadedMeta> meta;
    if (cmd == "eval") {
        meta = read_checkpoint(o.checkpoint);
        kind = meta->kind;
        o.model = model_kind_name(kind);
    } else if (cmd == "finetune" && !o.checkpoint.empty()) {
        kind = read_checkpoint(o.checkpoint).kind;
        o.model = model_kind_name(kind);
    }
    if (kind == ModelKind::kTransformer) {
        using M = TransformerModel<T>;
        if (cmd == "pretrain") {
            return cmd_pretrain<M>(g, o, run);
        }
        if (cmd == "finetune") {
            return cmd_finetune<M>(g, o, run);
        }
        return cmd_eval<M>(g, o, *meta, run);
    }
    using M = DnnModel<T>;
    if (cmd == "pretrain") {
        return cmd_pretrain<M>(g, o, run);
    }
    if (cmd == "finetune") {
        return cmd_finetune<M>(g, o, run);
    }
    return cmd_eval<M>(g, o, *meta, run);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowlens: contrastive packet-sequence intrusion detection toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "TOML configuration file (command-line flags take precedence)");

    GlobalOptions g;
    auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every random stream");
    app.add_flag("--deterministic", g.deterministic, "Reproducible mode: fixed seed (0 unless given), single thread");
    app.add_option("--precision", g.precision, "Floating-point precision for models")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    app.add_option("--out", g.out, "Output directory");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled capture");
    TrafficProfile profile;
    synth->add_option("--flows", profile.flows, "Number of flows")->capture_default_str();
    synth->add_option("--malicious-fraction", profile.malicious_fraction, "Share of malicious flows")
        ->capture_default_str();
    synth->add_option("--separation", profile.separation, "Probability a malicious flow uses a malicious archetype")
        ->capture_default_str();
    synth->add_option("--shift", profile.shift, "Benign domain shift in [0, 1]")->capture_default_str();
    synth->add_option("--flow-gap", profile.mean_flow_gap_s, "Mean gap between flow starts (s)")->capture_default_str();

    auto* build = app.add_subcommand("build", "Build packet-sequence and NetFlow datasets from captures");
    std::vector<std::string> pcaps;
    std::string labels_path;
    AssemblyOptions assembly;
    double timeout_s = 120.0;
    build->add_option("pcaps", pcaps, "Capture files (.pcap)");
    build->add_option("--labels", labels_path, "Label sidecar (JSON rules)");
    build->add_option("--timeout", timeout_s, "Flow lifetime from first packet (s)")->capture_default_str();
    build->add_option("--max-packets", assembly.max_packets, "Packets kept per flow")->capture_default_str();
    build->add_option("--max-active-flows", assembly.max_active_flows, "Flow-table capacity (0 = unbounded)")
        ->capture_default_str();
    bool jsonl = false;
    build->add_flag("--jsonl", jsonl, "Also write sequences.jsonl (debug view)");

    TrainingOptions train;
    auto* pretrain_cmd = app.add_subcommand("pretrain", "Contrastive pretraining on benign flows");
    auto* finetune_cmd = app.add_subcommand("finetune", "Few-shot supervised fine-tuning");
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
    auto* matrix_cmd = app.add_subcommand("matrix", "Run the model x dataset x protocol grid");
    for (auto* sub : {pretrain_cmd, finetune_cmd, eval_cmd, matrix_cmd}) {
        add_experiment_options(sub, train.exp);
    }
    for (auto* sub : {pretrain_cmd, finetune_cmd, eval_cmd}) {
        sub->add_option("--data", train.data, "Dataset directory (from build)")->required()->expected(1);
    }
    matrix_cmd->add_option("--data", train.data, "Dataset directories, optionally NAME=DIR")->required();
    matrix_cmd->add_option("--models", train.models, "Model families")
        ->check(CLI::IsMember({"transformer", "dnn"}))
        ->capture_default_str();
    for (auto* sub : {pretrain_cmd, finetune_cmd}) {
        sub->add_option("--model", train.model, "transformer or dnn")
            ->check(CLI::IsMember({"transformer", "dnn"}))
            ->capture_default_str();
    }
    finetune_cmd->add_option("--checkpoint", train.checkpoint, "Pretrained checkpoint (random init when absent)");
    eval_cmd->add_option("--checkpoint", train.checkpoint, "Checkpoint to evaluate")->required();
    eval_cmd->add_option("--reference", train.reference, "Reference dataset for similarity scoring (default: --data)");
    eval_cmd->add_option("--mode", train.mode, "auto, unsupervised or classifier")
        ->check(CLI::IsMember({"auto", "unsupervised", "classifier"}))
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        (void)app.exit(e);
        return 2;
    }

    g.seed_given = seed_opt->count() > 0;
    if (!g.seed_given && !g.deterministic) {
        g.seed = std::random_device{}();
    }
    if (g.deterministic) {
        Eigen::setNbThreads(1);
    }
    if (g.out.empty()) {
        std::cerr << "error: --out DIR is required\n";
        return 2;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    std::optional<RunDir> run;
    try {
        if (cmd != "synth" && cmd != "build") {
            validate_experiment(train.exp);
            for (const auto& d : train.data) {
                const auto eq = d.find('=');
                require_dataset(cmd == "matrix" && eq != std::string::npos ? d.substr(eq + 1) : d);
            }
            if (!train.reference.empty()) {
                require_dataset(train.reference);
            }
            if (!train.checkpoint.empty()) {
                require_file(train.checkpoint, "checkpoint");
            }
        }
        if (cmd == "build") {
            if (pcaps.empty()) {
                throw UsageError("build: no capture files given");
            }
            if (!(timeout_s > 0.0)) {
                throw UsageError("build: --timeout must be > 0");
            }
            assembly.timeout_us = seconds_to_us(timeout_s);
        }
        run.emplace(g.out);
        telemetry().log(cmd, "seed " + std::to_string(g.seed) + ", precision " + g.precision +
                                 (g.deterministic ? ", deterministic" : ""));
        int rc = 0;
        if (cmd == "synth") {
            rc = cmd_synth(g, profile, *run);
        } else if (cmd == "build") {
            rc = cmd_build(g, pcaps, labels_path, assembly, jsonl, *run);
        } else if (cmd == "matrix") {
            rc = g.precision == "f64" ? cmd_matrix<double>(g, train, *run) : cmd_matrix<float>(g, train, *run);
        } else {
            rc = g.precision == "f64" ? dispatch_model<double>(cmd, g, train, *run)
                                      : dispatch_model<float>(cmd, g, train, *run);
        }
        telemetry().log(cmd, "done: " + run->path().string());
        return rc;
    } catch (const UsageError& e) {
        if (run) {
            run->rollback();
        }
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        if (run) {
            run->rollback();
        }
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
