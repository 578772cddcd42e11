import { ConsoleApp } from "./app";

const root = document.getElementById("app");
const input = document.getElementById("base-url") as HTMLInputElement | null;
const button = document.getElementById("connect") as HTMLButtonElement | null;

if (root !== null && input !== null && button !== null) {
  const app = new ConsoleApp(root);
  const go = () => {
    void app.connect(input.value.trim());
  };
  button.addEventListener("click", go);
  input.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") go();
  });
}
