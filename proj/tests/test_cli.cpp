#include <doctest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "support.hpp"
#include "vlq/cli.hpp"
#include "vlq/data.hpp"

using namespace vlq;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out, err;
    Run r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

std::string strip_wall(const std::string& log) {
    std::string out;
    for (const auto& line : lines_of(log)) out += line.substr(0, line.find(" wall_seconds=")) + "\n";
    return out;
}

// Small toy backbone so every CLI run stays fast.
const std::vector<std::string> kSmall = {"--toy-layers", "2", "--toy-width", "16", "--toy-heads", "2",
                                         "--prompt-length", "2"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
    head.insert(head.end(), tail.begin(), tail.end());
    return head;
}

struct Fixture {
    testing::TempDir dir;
    std::string manifest;

    Fixture() {
        const auto r = run({"synth", "--images", "24", "--groups", "6", "--seed", "3", "--out-dir", (dir / "data").string()});
        REQUIRE(r.code == 0);
        manifest = (dir / "data" / "manifest.csv").string();
    }

    Run train(const std::string& out, std::vector<std::string> extra = {}) {
        return run(with(with({"train", "--manifest", manifest, "--out-dir", (dir / out).string(), "--epochs", "2",
                              "--batch-size", "8", "--learning-rate", "0.01"},
                             kSmall),
                        extra));
    }
};

} // namespace

TEST_CASE("train writes its artifacts and reruns identically") {
    Fixture f;
    const auto a = f.train("a");
    REQUIRE(a.code == 0);
    CHECK(std::filesystem::exists(f.dir / "a" / "state.ckpt"));
    CHECK(std::filesystem::exists(f.dir / "a" / "config.lock"));
    const auto log = read_file(f.dir / "a" / "train.log");
    CHECK(lines_of(log).size() == 2);
    CHECK(log.rfind("epoch=1 L_percept=", 0) == 0);

    const auto b = f.train("b");
    REQUIRE(b.code == 0);
    CHECK(strip_wall(read_file(f.dir / "b" / "train.log")) == strip_wall(log));
    CHECK(read_file(f.dir / "b" / "state.ckpt") == read_file(f.dir / "a" / "state.ckpt"));

    const auto lock = nlohmann::json::parse(read_file(f.dir / "a" / "config.lock"));
    CHECK(lock["train"]["prompt_length"] == 2);
    CHECK(lock["train"]["crop_size"] == 32);
    CHECK(lock["command"] == "train");
}

TEST_CASE("eval and predict agree") {
    Fixture f;
    REQUIRE(f.train("t").code == 0);
    const auto state = (f.dir / "t" / "state.ckpt").string();
    const auto e = run(with({"eval", "--manifest", f.manifest, "--state", state, "--out-dir", (f.dir / "e").string(),
                             "--eval-crops", "2"},
                            kSmall));
    REQUIRE(e.code == 0);
    CHECK(e.out.find("srcc=") != std::string::npos);
    const auto report = nlohmann::json::parse(read_file(f.dir / "e" / "report.json"));
    CHECK(report["repeats"].size() == 1);
    CHECK(std::filesystem::exists(f.dir / "e" / "report.csv"));

    const auto rows = lines_of(read_file(f.dir / "e" / "predictions.csv"));
    REQUIRE(rows.size() >= 3);
    CHECK(rows[0] == "image_path,prediction,target");
    std::map<std::string, std::string> expected;
    std::vector<std::string> args = {"--toy-layers", "2", "--toy-width", "16", "--toy-heads", "2", "predict",
                                     "--state", state, "--eval-crops", "2"};
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto c1 = rows[i].find(',');
        const auto c2 = rows[i].find(',', c1 + 1);
        const auto path = (f.dir / "data" / rows[i].substr(0, c1)).string();
        expected[path] = rows[i].substr(c1 + 1, c2 - c1 - 1);
        args.push_back(path);
    }
    const auto p = run(args);
    REQUIRE(p.code == 0);
    const auto out = lines_of(p.out);
    CHECK(out[0] == "image,q_percept");
    REQUIRE(out.size() == rows.size());
    for (std::size_t i = 1; i < out.size(); ++i) {
        const auto c = out[i].find(',');
        CHECK(out[i].substr(c + 1) == expected[out[i].substr(0, c)]);
    }

    const auto pa = run({"--toy-layers", "2", "--toy-width", "16", "--toy-heads", "2", "predict", "--state", state,
                         "--with-align", args.back()});
    REQUIRE(pa.code == 0);
    CHECK(lines_of(pa.out)[0] == "image,q_percept,q_align");

    const auto ea = run(with({"eval", "--manifest", f.manifest, "--state", state, "--task", "align", "--out-dir",
                              (f.dir / "ea").string()},
                             kSmall));
    CHECK(ea.code == 0);
}

TEST_CASE("eval without a state retrains per repeat") {
    Fixture f;
    const auto e = run(with({"eval", "--manifest", f.manifest, "--out-dir", (f.dir / "r").string(), "--epochs", "1",
                             "--batch-size", "8", "--repeats", "2", "--eval-crops", "1"},
                            kSmall));
    REQUIRE(e.code == 0);
    const auto report = nlohmann::json::parse(read_file(f.dir / "r" / "report.json"));
    CHECK(report["repeats"].size() == 2);
    CHECK(report["stddev"]["srcc"].get<double>() >= 0.0);
    const auto md = run({"report", "--out-dir", (f.dir / "r").string()});
    CHECK(md.code == 0);
    CHECK(md.out.find("| srcc |") != std::string::npos);
}

TEST_CASE("exit codes") {
    Fixture f;
    REQUIRE(f.train("t").code == 0);
    const auto state = (f.dir / "t" / "state.ckpt").string();

    // mismatched shape: named in the message
    const auto m = run({"--toy-layers", "2", "--toy-width", "16", "--toy-heads", "2", "--prompt-length", "4", "eval",
                        "--manifest", f.manifest, "--state", state, "--out-dir", (f.dir / "m").string()});
    CHECK(m.code == 2);
    CHECK(m.err.find("prompt_length") != std::string::npos);

    // a different backbone is refused
    const auto other = run({"--toy-layers", "2", "--toy-width", "16", "--toy-heads", "2", "--backbone-seed", "9",
                            "predict", "--state", state, (f.dir / "data" / "img_0000.png").string()});
    CHECK(other.code == 2);

    CHECK(run({"train", "--manifest", (f.dir / "none.csv").string()}).code == 2);
    CHECK(run({"train", "--bogus-flag"}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({}).code == 2);
    CHECK(run({"train", "--manifest", f.manifest, "--lambda", "-1"}).code == 2);
    CHECK(run({"train", "--manifest", f.manifest, "--alignment-mode", "psychic"}).code == 2);
    CHECK(run({"report", "--out-dir", (f.dir / "empty").string()}).code == 2);
    CHECK(run({"--help"}).code == 0);

    // constant targets make the normalizer degenerate: a numerical failure
    auto records = load_manifest(f.manifest, ManifestFormat::canonical);
    for (auto& r : records) r.mos_percept = 3.0;
    write_manifest(f.dir / "data" / "flat.csv", records);
    const auto flat = run(with({"train", "--manifest", (f.dir / "data" / "flat.csv").string(), "--out-dir",
                                (f.dir / "flat").string(), "--epochs", "1"},
                               kSmall));
    CHECK(flat.code == 3);
    CHECK(flat.err.find("numerical error") != std::string::npos);
}

TEST_CASE("ablate, analyze and config files") {
    Fixture f;
    std::ofstream(f.dir / "run.toml") << "epochs = 1\nbatch-size = 8\n";
    const auto a = run(with({"ablate", "--config", (f.dir / "run.toml").string(), "--manifest", f.manifest,
                             "--out-dir", (f.dir / "ab").string(), "--eval-crops", "1"},
                            kSmall));
    REQUIRE(a.code == 0);
    const auto rows = lines_of(read_file(f.dir / "ab" / "ablation.csv"));
    REQUIRE(rows.size() == 6);
    CHECK(rows[1].rfind("zero_shot,0,0,0,0,blind,0,0,", 0) == 0);
    CHECK(rows[2].rfind("A1,1,0,0,0,blind,", 0) == 0);
    CHECK(rows[3].rfind("A2,1,1,0,0,blind,", 0) == 0);
    CHECK(rows[4].rfind("full,1,1,1,1,blind,", 0) == 0);
    CHECK(rows[5].rfind("B1,1,1,1,1,text_conditioned,", 0) == 0);
    const auto lock = nlohmann::json::parse(read_file(f.dir / "ab" / "config.lock"));
    CHECK(lock["train"]["epochs"] == 1);
    CHECK(lock["train"]["batch_size"] == 8);

    const auto an = run({"analyze", "--manifest", f.manifest, "--out-dir", (f.dir / "an").string()});
    REQUIRE(an.code == 0);
    const auto arows = lines_of(read_file(f.dir / "an" / "analysis.csv"));
    CHECK(arows.front() == "generator,n,srcc");
    CHECK(arows.back().rfind("overall,24,", 0) == 0);
    CHECK(arows.size() == 5);
}

TEST_CASE("exported backbones load back") {
    Fixture f;
    const auto path = (f.dir / "bb.ckpt").string();
    REQUIRE(run({"--toy-layers", "2", "--toy-width", "16", "--toy-heads", "2", "export-backbone", path}).code == 0);
    REQUIRE(f.train("t").code == 0);
    // the state trained on the toy backbone is accepted with the exported file
    const auto p = run({"--backbone", path, "predict", "--state", (f.dir / "t" / "state.ckpt").string(),
                        (f.dir / "data" / "img_0001.png").string()});
    CHECK(p.code == 0);
}
