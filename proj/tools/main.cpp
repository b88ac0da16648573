// Copyright (c) 2026 The grainmoe Authors.
// SPDX-License-Identifier: Apache-2.0

#include "grainmoe/cli.hpp"

int main(int argc, char** argv) { return grainmoe::run_cli(argc, argv); }
