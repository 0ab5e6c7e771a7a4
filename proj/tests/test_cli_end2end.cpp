// Drives the installed CLI binary through the full stage flow on a tiny
// configuration: pretrain -> distill (baseline and metadd) -> eval ->
// cam-export -> report, plus resumability and error-category checks.

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("METADD_CLI");
  REQUIRE(p != nullptr);
  return p;
}

int run(const std::string& args, std::string* output = nullptr) {
  static int counter = 0;
  fs::path log = fs::temp_directory_path() /
                 ("metadd_cli_out_" + std::to_string(counter++) + ".txt");
  std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
  int rc = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(log);
    output->assign((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  }
  fs::remove(log);
  return WEXITSTATUS(rc);
}

fs::path workspace() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "metadd_e2e";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string tiny_config() {
  static std::string path = [] {
    nlohmann::json j = {
        {"seed", 3},
        {"output_dir", (workspace() / "runs").string()},
        {"dataset",
         {{"name", "shapes3"}, {"classes", 3}, {"train_per_class", 60},
          {"val_per_class", 30}, {"resolution", 32}}},
        {"pool",
         {{"backbone",
           {{"family", "conv-plain"}, {"depth", 2}, {"width", 8},
            {"num_classes", 3}, {"input_resolution", 32}}},
          {"auxiliaries",
           {{{"family", "conv-plain"}, {"depth", 2}, {"width", 6},
             {"num_classes", 3}, {"input_resolution", 32}},
            {{"family", "attention"}, {"depth", 1}, {"width", 16},
             {"patch_size", 8}, {"num_classes", 3}, {"input_resolution", 32}}}},
          {"pretrain", {{"epochs", 2}, {"batch_size", 32}}}}},
        {"distill",
         {{"baseline", "dm"}, {"iterations", 3}, {"ipc", 2},
          {"batch_real_per_class", 8}, {"snapshot_every", 2}}},
        {"eval",
         {{"repeats", 1}, {"warmup_steps", 5}, {"decay_steps", 10},
          {"unseen",
           {{{"family", "conv-mobile"}, {"depth", 6}, {"width", 6},
             {"num_classes", 3}, {"input_resolution", 32}}}}}},
        {"erasure",
         {{"max_train_samples", 30}, {"repeats", 1}, {"warmup_steps", 5},
          {"decay_steps", 10}}}};
    fs::path p = workspace() / "tiny.json";
    std::ofstream(p) << j.dump(2);
    return p.string();
  }();
  return path;
}

}  // namespace

TEST_CASE("cli end to end") {
  std::string cfg = " --config " + tiny_config();
  std::string out;

  SECTION("full stage flow") {
    REQUIRE(run("pretrain" + cfg, &out) == 0);
    // rerun is a no-op
    REQUIRE(run("pretrain" + cfg, &out) == 0);
    CHECK(out.find("already complete") != std::string::npos);

    REQUIRE(run("distill" + cfg + " --metadd off", &out) == 0);
    REQUIRE(run("distill" + cfg + " --metadd on", &out) == 0);

    // the two runs live in different hash-keyed directories
    fs::path runs = workspace() / "runs" / "distill";
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(runs)) dirs.push_back(e.path());
    REQUIRE(dirs.size() == 2);
    for (const auto& d : dirs) {
      CHECK(fs::exists(d / "distilled.mdds"));
      CHECK(fs::exists(d / "steps.jsonl"));
      CHECK(fs::exists(d / "manifest.json"));
      CHECK(fs::exists(d / "config.json"));
    }

    // rerunning a completed distill is a no-op notice
    REQUIRE(run("distill" + cfg + " --metadd on", &out) == 0);
    CHECK(out.find("already complete") != std::string::npos);

    // eval both runs (they are disambiguated by the same flags)
    REQUIRE(run("eval" + cfg + " --metadd off", &out) == 0);
    CHECK(out.find("seen average") != std::string::npos);
    REQUIRE(run("eval" + cfg + " --metadd on --snapshots", &out) == 0);

    // cam-export on the metadd run
    REQUIRE(run("cam-export" + cfg + " --metadd on --samples 2", &out) == 0);
    std::string adir, bdir;
    for (const auto& d : dirs) {
      std::ifstream in(d / "config.json");
      nlohmann::json cj = nlohmann::json::parse(in);
      (cj.at("distill").at("metadd").get<bool>() ? bdir : adir) = d.string();
    }
    CHECK(fs::exists(fs::path(bdir) / "cams"));
    bool found_cam = false, found_mask = false;
    for (const auto& e : fs::directory_iterator(fs::path(bdir) / "cams")) {
      std::string n = e.path().filename().string();
      if (n.find(".cam.") != std::string::npos && e.path().extension() == ".png")
        found_cam = true;
      if (n.find(".meta.") != std::string::npos && n.find(".json") == std::string::npos)
        found_mask = true;
    }
    CHECK(found_cam);
    CHECK(found_mask);

    // side-by-side report with plots
    REQUIRE(run("report " + adir + " " + bdir, &out) == 0);
    CHECK(out.find("dm+metadd") != std::string::npos);
    CHECK(fs::exists(fs::path(adir) / "report" / "loss_vs_step.png"));
    CHECK(fs::exists(fs::path(adir) / "report" / "comparison.txt"));
    // accuracy-vs-step appears because the metadd run has snapshot evals
    CHECK(fs::exists(fs::path(adir) / "report" / "accuracy_vs_step.png"));
  }

  SECTION("machine-parseable error categories") {
    // unknown config key -> config error, exit 2
    fs::path bad = workspace() / "bad.json";
    std::ofstream(bad) << R"({"outptu_dir": "x"})";
    CHECK(run("distill --config " + bad.string(), &out) == 2);
    CHECK(out.find("\"error\":\"config\"") != std::string::npos);
    CHECK(out.find("output_dir") != std::string::npos);

    // eval before distill -> io error, exit 6
    fs::path cfg2 = workspace() / "fresh.json";
    {
      std::ifstream in(tiny_config());
      nlohmann::json j = nlohmann::json::parse(in);
      j["seed"] = 999;  // a config that has never been distilled
      std::ofstream(cfg2) << j.dump();
    }
    CHECK(run("eval --config " + cfg2.string(), &out) == 6);
    CHECK(out.find("\"error\":\"io\"") != std::string::npos);

    // metadd distill without a pretrained pool -> io error with a hint
    CHECK(run("distill --config " + cfg2.string() + " --metadd on", &out) == 6);
    CHECK(out.find("pretrain") != std::string::npos);
  }
}
