#include <doctest.h>

#include <cstring>
#include <fstream>

#include "support.hpp"
#include "vlq/container.hpp"

using namespace vlq;

namespace {

TensorFile sample_file() {
    TensorFile f;
    f.kind = "unit";
    f.format_version = 3;
    f.metadata = {{"note", "x"}, {"n", 2}};
    Matrix<float> a(2, 3, std::vector<float>{1.0f, -2.5f, 3.25f, 0.1f, 1e-30f, -0.0f});
    Matrix<double> b(1, 2, std::vector<double>{0.1, 1.0 / 3.0});
    f.tensors.push_back(NamedTensor::from_matrix("a", a, DType::f32));
    f.tensors.push_back(NamedTensor::from_matrix("b", b, DType::f64));
    return f;
}

} // namespace

TEST_CASE("container round trip is bit exact") {
    testing::TempDir dir;
    const auto f = sample_file();
    write_tensor_file(dir / "t.bin", f);
    const auto g = read_tensor_file(dir / "t.bin");
    CHECK(g.kind == "unit");
    CHECK(g.format_version == 3);
    CHECK(g.metadata == f.metadata);
    REQUIRE(g.tensors.size() == 2);
    CHECK(g.get("a").to_matrix<float>() == f.get("a").to_matrix<float>());
    CHECK(g.get("b").dtype == DType::f64);
    CHECK(g.get("b").values == f.get("b").values);
    CHECK(g.contains("a"));
    CHECK_FALSE(g.contains("c"));
    CHECK_THROWS_AS(g.get("c"), FormatError);
}

TEST_CASE("corrupted containers are rejected") {
    const auto bytes = encode_tensor_file(sample_file());
    CHECK_NOTHROW(decode_tensor_file(bytes));

    SUBCASE("bad magic") {
        auto b = bytes;
        b[0] = 'X';
        CHECK_THROWS_AS(decode_tensor_file(b), FormatError);
    }
    SUBCASE("unsupported version") {
        auto b = bytes;
        b[4] = 9;
        CHECK_THROWS_AS(decode_tensor_file(b), FormatError);
    }
    SUBCASE("every truncation") {
        for (std::size_t n = 0; n < bytes.size(); ++n) {
            std::vector<char> b(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
            CHECK_THROWS_AS(decode_tensor_file(b), FormatError);
        }
    }
    SUBCASE("trailing garbage") {
        auto b = bytes;
        b.push_back(0);
        CHECK_THROWS_AS(decode_tensor_file(b), FormatError);
    }
    SUBCASE("header not json") {
        auto b = bytes;
        b[16] = '#';
        CHECK_THROWS_AS(decode_tensor_file(b), FormatError);
    }
    SUBCASE("header length too large") {
        auto b = bytes;
        std::uint64_t h = 0;
        std::memcpy(&h, b.data() + 8, 8);
        h += 1000;
        std::memcpy(b.data() + 8, &h, 8);
        CHECK_THROWS_AS(decode_tensor_file(b), FormatError);
    }
}

TEST_CASE("missing file is an io error") {
    testing::TempDir dir;
    CHECK_THROWS_AS(read_tensor_file(dir / "none.bin"), IoError);
}
