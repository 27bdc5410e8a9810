// Black-box checks of the CLI surface: exit codes, idempotence. The binary
// path arrives through the BMT_CLI environment variable; without it the
// cases report themselves as skipped.
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "bmt/data.hpp"
#include "bmt/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

const char* cli_path() { return std::getenv("BMT_CLI"); }

int run(const std::string& cmd) {
    const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path work_dir() {
    const fs::path dir = fs::temp_directory_path() / "bmt_cli_tests";
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("cli: usage errors exit 2, data errors exit 3") {
    const char* cli = cli_path();
    if (!cli) {
        MESSAGE("BMT_CLI not set; skipping");
        return;
    }
    CHECK(run(std::string(cli)) == 2);                       // missing subcommand
    CHECK(run(std::string(cli) + " propose") == 2);          // missing required options
    CHECK(run(std::string(cli) + " --help") == 0);
    CHECK(run(std::string(cli) + " evaluate --predictions /nonexistent_p.json"
                                 " --ground-truth /nonexistent_g.json") == 3);
}

TEST_CASE("cli: synth-data is idempotent byte for byte") {
    const char* cli = cli_path();
    if (!cli) {
        MESSAGE("BMT_CLI not set; skipping");
        return;
    }
    const fs::path dir = work_dir();
    const fs::path spec_path = dir / "spec.json";
    bmt::SynthSpec spec;
    spec.num_videos = 2;
    spec.duration_sec = 16.0;
    spec.events_per_video = 2;
    spec.seed = 4242;
    bmt::write_file_atomic(spec_path, bmt::synth_spec_to_json(spec).dump(2) + "\n");

    const fs::path out1 = dir / "d1", out2 = dir / "d2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    REQUIRE(run(std::string(cli) + " synth-data --spec " + spec_path.string() + " --out " +
                out1.string()) == 0);
    REQUIRE(run(std::string(cli) + " synth-data --spec " + spec_path.string() + " --out " +
                out2.string()) == 0);
    CHECK(bmt::read_file_bytes(out1 / "annotations.json") ==
          bmt::read_file_bytes(out2 / "annotations.json"));
    CHECK(bmt::read_file_bytes(out1 / "features" / "synth_0000.audio.bmtf") ==
          bmt::read_file_bytes(out2 / "features" / "synth_0000.audio.bmtf"));

    // anchors over the generated annotations
    CHECK(run(std::string(cli) + " estimate-anchors --annotations " +
              (out1 / "annotations.json").string() +
              " --modality audio --count 2 --kernel-count 1 --cell-seconds 1.0 --seed 3") == 0);
}

TEST_CASE("shipped reference configs parse, validate and stay balanced") {
    const char* configs = std::getenv("BMT_CONFIGS");
    if (!configs) {
        MESSAGE("BMT_CONFIGS not set; skipping");
        return;
    }
    const bmt::RunConfig cap = bmt::load_run_config(fs::path(configs) / "reference_caption.json");
    bmt::validate_model_config(cap.model);
    CHECK(cap.model.d_a == 128);
    CHECK(cap.model.d_v == 1024);
    CHECK(cap.model.d_c == 300);
    CHECK(cap.model.num_layers == 2);
    CHECK(cap.model.heads == 4);
    CHECK(cap.model.d_internal == 1024);
    CHECK(cap.train.label_smoothing == 0.7);
    CHECK(cap.train.learning_rate == 5e-5);
    CHECK(cap.train.caption_batch_size == 32);
    CHECK(cap.train.early_stop_patience == 30);

    const bmt::RunConfig prop = bmt::load_run_config(fs::path(configs) / "reference_proposal.json");
    bmt::validate_model_config(prop.model);
    bmt::validate_proposal_config(prop.proposals);
    CHECK(prop.proposals.anchors_audio == 48);
    CHECK(prop.proposals.anchors_visual == 128);
    CHECK(prop.proposals.kernel_count == 10);
    CHECK(prop.proposals.kernels_audio ==
          std::vector<int>{5, 13, 23, 35, 51, 69, 91, 121, 161, 211});
    CHECK(prop.proposals.kernels_visual == std::vector<int>{1, 5, 9, 13, 19, 25, 35, 45, 61, 79});
    CHECK(prop.proposals.head_hidden == 512);
    CHECK(prop.proposals.pad_audio == 800);
    CHECK(prop.proposals.pad_visual == 300);
    CHECK(prop.train.coeff_noobj == 100.0);
    CHECK(prop.train.proposal_batch_size == 16);
    CHECK(prop.train.max_epochs == 70);

    const auto balance = bmt::modality_balance(
        static_cast<uint64_t>(prop.proposals.pad_audio),
        static_cast<uint64_t>(prop.proposals.anchors_audio),
        static_cast<uint64_t>(prop.proposals.pad_visual),
        static_cast<uint64_t>(prop.proposals.anchors_visual));
    CHECK(balance.balanced);
    CHECK(balance.audio_product == 38400ull);
}

TEST_CASE("checkpoint kind is validated on load") {
    bmt::ParamStore store;
    bmt::Rng rng(3);
    store.insert("encoder.dummy", bmt::Tensor::uniform({2, 2}, -1, 1, rng, true));
    const fs::path path = work_dir() / "wrong_kind.bmtc";
    bmt::save_checkpoint(path, nlohmann::json{{"kind", "proposal_generator"}}, store);
    CHECK_THROWS_AS(bmt::load_captioner(path), bmt::FormatError);
    CHECK_THROWS_AS(bmt::load_proposal_model("/nonexistent.bmtc"), bmt::DataError);
}

TEST_CASE("pre-trained embedding tables preset the captioner") {
    // a fake 7-token x 4-wide table stored as a feature file
    bmt::FeatureSequence table;
    table.modality = bmt::Modality::audio;
    table.T = 7;
    table.d = 4;
    table.cell_seconds = 0.0;
    bmt::Rng rng(5);
    table.values.resize(28);
    for (auto& v : table.values) v = static_cast<double>(static_cast<float>(rng.uniform(-1, 1)));
    const fs::path path = work_dir() / "emb.bmtf";
    bmt::save_features(path, table);

    bmt::Tensor emb = bmt::load_embedding_table(path, 7, 4);
    CHECK(emb.values() == table.values);
    CHECK(emb.requires_grad());
    CHECK_THROWS_AS(bmt::load_embedding_table(path, 8, 4), bmt::DataError);

    // the preset flows through create_or_attach into the built captioner
    bmt::ModelConfig cfg;
    cfg.d_a = 4;
    cfg.d_v = 6;
    cfg.d_c = 4;
    cfg.num_layers = 1;
    cfg.heads = 2;
    cfg.d_internal = 4;
    cfg.dropout = 0.0;
    cfg.vocab_size = 7;
    bmt::ParamStore store;
    store.insert("embedding.table", emb);
    bmt::Rng prng(9);
    bmt::ParamBuilder b(store, prng, true, bmt::ParamBuilder::Mode::create_or_attach);
    const auto views = bmt::build_captioner(b, cfg);
    CHECK(views.embedding.values() == table.values);
}
