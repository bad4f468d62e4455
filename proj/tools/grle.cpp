// Copyright 2026 The grle Authors
// SPDX-License-Identifier: Apache-2.0

#include "grle/cli.hpp"

int main(int argc, char** argv) { return grle::run_cli(argc, argv); }
