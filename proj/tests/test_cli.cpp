#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  std::string outfile =
      (fs::temp_directory_path() / ("btdm_cli_out_" + std::to_string(counter++))).string();
  std::string cmd = std::string(BTDM_CLI_PATH) + " " + args + " > " + outfile + " 2>&1";
  int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(outfile);
  std::stringstream ss;
  ss << is.rdbuf();
  r.output = ss.str();
  fs::remove(outfile);
  return r;
}

bool same_bytes(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  return sa.str() == sb.str();
}

}  // namespace

TEST_CASE("cli: help exits 0 on every subcommand") {
  CHECK(run_cli("--help").code == 0);
  for (std::string sub : {"gen-data", "train", "sample", "eval", "ablate"}) {
    CliResult r = run_cli(sub + " --help");
    CHECK(r.code == 0);
    CHECK(r.output.find("--") != std::string::npos);
  }
}

TEST_CASE("cli: usage errors exit 1") {
  CHECK(run_cli("").code == 1);  // missing subcommand
  CHECK(run_cli("bogus-subcommand").code == 1);
  CHECK(run_cli("gen-data --no-such-flag 1").code == 1);
  CHECK(run_cli("sample --k 10").code == 1);  // missing required options
}

TEST_CASE("cli: missing data paths exit 2 and name the path") {
  CliResult r = run_cli("train --data /nonexistent_btdm_dir --out /tmp/x.btck --steps 1");
  CHECK(r.code == 2);
  CHECK(r.output.find("/nonexistent_btdm_dir") != std::string::npos);

  CliResult e = run_cli("eval --pred /nonexistent_btdm_dir --gt /tmp --report /tmp/r.json");
  CHECK(e.code == 2);
}

TEST_CASE("cli: gen-data is seed-reproducible bit-exactly") {
  std::string d1 = testutil::scratch_dir("gen1"), d2 = testutil::scratch_dir("gen2");
  CHECK(run_cli("gen-data --out " + d1 + " --train 2 --test 1 --frames 4 --size 32 --seed 11")
            .code == 0);
  CHECK(run_cli("gen-data --out " + d2 + " --train 2 --test 1 --frames 4 --size 32 --seed 11")
            .code == 0);
  CHECK(same_bytes(d1 + "/train/seq_0000.btds", d2 + "/train/seq_0000.btds"));
  CHECK(same_bytes(d1 + "/test/seq_0000.btds", d2 + "/test/seq_0000.btds"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("cli: end-to-end pipeline smoke (gen-data -> train -> sample -> eval)") {
  std::string root = testutil::scratch_dir("pipeline");
  std::string data = root + "/data", gt1 = root + "/gt1";

  CHECK(run_cli("gen-data --out " + data + " --train 8 --test 2 --frames 8 --size 32 --seed 5")
            .code == 0);
  // a one-sequence ground-truth split: same seed and index as test sequence 0
  CHECK(run_cli("gen-data --out " + gt1 + " --train 1 --test 1 --frames 8 --size 32 --seed 5")
            .code == 0);
  CHECK(same_bytes(data + "/test/seq_0000.btds", gt1 + "/test/seq_0000.btds"));

  std::string ckpt = root + "/model.btck";
  CliResult tr = run_cli("train --data " + data +
                         "/train --mode single-image --steps 200 --batch 2 --seed 1 --out " + ckpt);
  INFO(tr.output);
  CHECK(tr.code == 0);
  CHECK(fs::exists(ckpt));
  CHECK(fs::exists(ckpt + ".losses.jsonl"));

  std::string pred = root + "/pred", grid = root + "/grid.png";
  CliResult sr = run_cli("sample --ckpt " + ckpt + " --poses " + data + "/test/seq_0000.btds" +
                         " --cond " + data + "/test/seq_0000.btds" +
                         " --k 50 --seed 7 --id 10000 --out " + pred + " --grid " + grid);
  INFO(sr.output);
  CHECK(sr.code == 0);
  CHECK(fs::exists(pred + "/manifest.json"));
  {
    std::ifstream g(grid, std::ios::binary);
    REQUIRE(g.good());
    unsigned char sig[4] = {0};
    g.read((char*)sig, 4);
    CHECK(sig[0] == 0x89);  // PNG signature
    CHECK(sig[1] == 'P');
  }

  // sampling is seed-reproducible bit-exactly
  std::string pred2 = root + "/pred2";
  CHECK(run_cli("sample --ckpt " + ckpt + " --poses " + data + "/test/seq_0000.btds --cond " +
                data + "/test/seq_0000.btds --k 50 --seed 7 --id 10000 --out " + pred2)
            .code == 0);
  CHECK(same_bytes(pred + "/seq_0000.btds", pred2 + "/seq_0000.btds"));

  std::string report = root + "/report.json";
  CliResult ev = run_cli("eval --pred " + pred + " --gt " + gt1 + "/test --report " + report);
  INFO(ev.output);
  CHECK(ev.code == 0);
  {
    std::ifstream is(report);
    REQUIRE(is.good());
    json j;
    is >> j;
    CHECK(j.contains("ssim_mean"));
    CHECK(j.contains("tconsist_mean"));
    CHECK(j.contains("drift_slope"));
    REQUIRE(j.at("per_sequence").size() == 1);
    CHECK(j.at("per_sequence")[0].at("id").get<int>() == 10000);
    double sm = j.at("ssim_mean").get<double>();
    CHECK(sm > -1.0);
    CHECK(sm <= 1.0);
  }

  // mismatched sequence counts are a data error naming both counts
  CliResult bad =
      run_cli("eval --pred " + pred + " --gt " + data + "/test --report " + root + "/bad.json");
  CHECK(bad.code == 2);
  CHECK(bad.output.find("1") != std::string::npos);
  CHECK(bad.output.find("2") != std::string::npos);

  // unconditional sampling path (no appearance condition)
  CliResult un = run_cli("sample --ckpt " + ckpt + " --poses " + data +
                         "/test/seq_0001.btds --cond none --k 10 --seed 3 --out " + root +
                         "/uncond");
  INFO(un.output);
  CHECK(un.code == 0);

  fs::remove_all(root);
}

TEST_CASE("cli: ablate emits matched-budget json and markdown rows") {
  std::string root = testutil::scratch_dir("ablate_cli");
  CHECK(run_cli("gen-data --out " + root + "/d --train 4 --test 2 --frames 4 --size 16 --seed 3")
            .code == 0);
  CliResult r = run_cli("ablate --data " + root + "/d --out " + root +
                        "/res.json --steps 25 --batch 2 --k 8 --seed 2");
  INFO(r.output);
  CHECK(r.code == 0);
  {
    std::ifstream is(root + "/res.json");
    REQUIRE(is.good());
    json j;
    is >> j;
    CHECK(j.at("sample_stream_matched").get<bool>());
    CHECK(j.at("steps").get<int>() == 25);
    for (const char* row : {"bidirectional", "unidirectional"}) {
      CHECK(j.at(row).contains("ssim_mean"));
      CHECK(j.at(row).contains("tconsist_mean"));
      CHECK(j.at(row).contains("drift_slope"));
    }
  }
  std::ifstream md(root + "/res.json.md");
  REQUIRE(md.good());
  std::stringstream ss;
  ss << md.rdbuf();
  CHECK(ss.str().find("| bidirectional") != std::string::npos);
  CHECK(ss.str().find("| unidirectional") != std::string::npos);
  fs::remove_all(root);
}
