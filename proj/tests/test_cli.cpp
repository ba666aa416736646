// SPDX-License-Identifier: Apache-2.0
// Runs the built e5kit binary as a subprocess.
#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "e5kit_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome cli(const std::string& args) {
  const auto out = scratch() / "stdout.txt", err = scratch() / "stderr.txt";
  const std::string cmd = std::string("\"") + E5KIT_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string at(const std::string& name) { return (scratch() / name).string(); }

}  // namespace

TEST_CASE("unknown config keys are usage errors naming the key") {
  const auto r = cli("gen-synthetic --set pretrain.bogus=3");
  CHECK(r.code == 2);
  CHECK(r.err.find("pretrain.bogus") != std::string::npos);
  const auto j = nlohmann::json::parse(r.err);
  CHECK(j["error"] == "usage");

  std::ofstream(at("bad.cfg")) << "seed=1\nnope=2\n";
  const auto f = cli("gen-synthetic --config " + at("bad.cfg"));
  CHECK(f.code == 2);
  CHECK(f.err.find("nope") != std::string::npos);
}

TEST_CASE("missing or unknown commands are usage errors") {
  CHECK(cli("").code == 2);
  const auto r = cli("train-everything");
  CHECK(r.code == 2);
  CHECK(r.err.find("train-everything") != std::string::npos);
  CHECK(cli("--no-such-flag").code == 2);
}

TEST_CASE("list-keys prints every key") {
  const auto r = cli("--list-keys");
  CHECK(r.code == 0);
  CHECK(r.out.find("pretrain.negatives=in-batch") != std::string::npos);
  CHECK(r.out.find("filter.k=2") != std::string::npos);
}

TEST_CASE("missing required input is a runtime error with a JSON message") {
  const auto r = cli("pretrain --set out=" + at("nowhere") + " --set pretrain.input=" + at("absent.jsonl"));
  CHECK(r.code == 1);
  const auto j = nlohmann::json::parse(r.err.substr(r.err.rfind('{')));
  CHECK(j.contains("message"));
}

TEST_CASE("generate, train and evaluate through the CLI") {
  const std::string common = " --seed 3 --set synthetic.topics=8 --set synthetic.pairs_per_topic=60"
                             " --set synthetic.heldout_per_topic=5 --set synthetic.finetune_examples=50";
  const auto data = at("data");
  REQUIRE(cli("gen-synthetic" + common + " --set out=" + data).code == 0);
  for (const char* f : {"pairs.jsonl", "corpus.jsonl", "queries.jsonl", "qrels.txt", "config.txt"}) {
    CHECK(fs::exists(fs::path(data) / f));
  }

  auto train = [&](const std::string& out) {
    return cli("pretrain" + common + " --set pretrain.batch_size=32 --set pretrain.steps=150 --set pretrain.warmup=10" +
               " --set pretrain.input=" + data + "/pairs.jsonl --set out=" + out);
  };
  REQUIRE(train(at("model_a")).code == 0);
  REQUIRE(train(at("model_b")).code == 0);
  CHECK(slurp(at("model_a") + "/model.e5ck") == slurp(at("model_b") + "/model.e5ck"));
  CHECK(slurp(at("model_a") + "/loss.csv") == slurp(at("model_b") + "/loss.csv"));
  CHECK(slurp(at("model_a") + "/loss.csv").rfind("step,lr,loss", 0) == 0);

  const auto eval = cli("eval-retrieval --set model=" + at("model_a") + "/model.e5ck --set eval.corpus=" + data +
                        "/corpus.jsonl --set eval.queries=" + data + "/queries.jsonl --set eval.qrels=" + data +
                        "/qrels.txt --set out=" + at("eval"));
  REQUIRE(eval.code == 0);
  const auto report = nlohmann::json::parse(eval.out);
  CHECK(report["dataset"] == "queries");
  const double ndcg = report["metrics"]["ndcg@10"];
  CHECK(ndcg > 0.5);
  CHECK(ndcg <= 1.0);
  CHECK(report["metrics"].contains("recall@100"));
  CHECK(report["config"]["eval.k"] == "100");
}
