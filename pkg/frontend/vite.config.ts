import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    include: ["test/**/*.test.ts"],
    // the live test owns a fixed port and asserts on wall-clock latency
    fileParallelism: false,
  },
});
