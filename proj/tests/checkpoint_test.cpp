#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>

#include "inrseg/checkpoint.hpp"

using namespace inrseg;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("checkpoint round-trips tensors and metadata bitwise") {
  Checkpoint out;
  out.tensors["weights"] = Tensor::from({2, 3}, {1.0, -2.5, 3e14, 1e-300, -0.0, 0.125});
  out.tensors["bias"] = Tensor::from({1}, {0.1 + 0.2});  // non-representable decimal
  out.meta["step"] = "17";
  out.meta["note"] = "stage-1, lr 1e-3";

  const std::string path = temp_path("inrseg_ckpt_roundtrip.bin");
  save_checkpoint(path, out);
  const Checkpoint in = load_checkpoint(path);
  std::remove(path.c_str());

  REQUIRE(in.tensors.size() == 2);
  REQUIRE(in.meta.size() == 2);
  CHECK(in.meta.at("step") == "17");
  CHECK(in.meta.at("note") == "stage-1, lr 1e-3");
  const Tensor& w = in.tensors.at("weights");
  CHECK(w.shape() == out.tensors.at("weights").shape());
  for (Index i = 0; i < w.size(); ++i) {
    // bitwise equality, including the sign of -0.0
    CHECK(std::memcmp(&w.data()[i], &out.tensors.at("weights").data()[i], sizeof(Scalar)) == 0);
  }
  CHECK(in.tensors.at("bias").data()[0] == 0.1 + 0.2);
}

TEST_CASE("missing or truncated checkpoints raise io errors") {
  CHECK_THROWS_WITH_AS(load_checkpoint(temp_path("inrseg_ckpt_does_not_exist.bin")),
                       doctest::Contains("io-error"), Error);

  const std::string path = temp_path("inrseg_ckpt_truncated.bin");
  Checkpoint out;
  out.tensors["t"] = Tensor::from({4}, {1, 2, 3, 4});
  save_checkpoint(path, out);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  std::remove(path.c_str());
}

TEST_CASE("empty checkpoints survive the trip") {
  const std::string path = temp_path("inrseg_ckpt_empty.bin");
  save_checkpoint(path, Checkpoint{});
  const Checkpoint in = load_checkpoint(path);
  std::remove(path.c_str());
  CHECK(in.tensors.empty());
  CHECK(in.meta.empty());
}
