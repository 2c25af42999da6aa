// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

int main(int argc, char** argv) { return ckv::cli::run(argc, argv); }
